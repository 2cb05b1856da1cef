"""Shared reference strings and layout fixtures used by several test modules."""

SAMPLE_ESSAY = (
    "Dear local Newspaper @CAPS1 a take all your computer and given to the people "
    "around the world for the can stay in their houses chating with their family and friend. "
    "Computers help people around the world to connect with other people computer help kids "
    "do their homework and look up staff that happen around the world."
)

# expected count features of the sample essay with its reference spans
SAMPLE_WORD_COUNT = 56
SAMPLE_CHAR_LENGTH = 317
SAMPLE_AC_COUNT = 2
SAMPLE_EDU_COUNT = 7

LAUGHTER_PROMPT = (
    "We all understand the benefits of laughter. For example, someone once said, "
    "“Laughter is the shortest distance between two people.” Many other people "
    "believe that laughter is an important part of any relationship. Tell a true story "
    "in which laughter was one element or part."
)

COMPUTERS_PROMPT = (
    "Write a letter to your local newspaper in which you state your opinion on the effects "
    "computers have on people. Persuade the readers to agree with you."
)

# the sample essay cut into its reference discourse units
EDU_CHUNKS = [
    "Dear local Newspaper @CAPS1 a take all your computer",
    "and given to the people around the world",
    "for the can stay in their houses",
    "chating with their family and friend.",
    "Computers help people around the world to connect with other people computer help kids do their homework",
    "and look up staff",
    "that happen around the world.",
]

# and into its reference argument components
AC_CHUNKS = [
    "Dear local Newspaper @CAPS1 a take all your computer and given to the people around "
    "the world for the can stay in their houses chating with their family and friend.",
    "Computers help people around the world to connect with other people computer help kids "
    "do their homework and look up staff that happen around the world.",
]


def chunk_spans(chunks, kind, vocab):
    """Token spans of consecutive chunks over the concatenated tokenisation."""
    from aeslab.corpus import Span, tokenize

    spans = []
    cursor = 0
    for chunk in chunks:
        n = len(tokenize(chunk, vocab))
        spans.append(Span(cursor, cursor + n, kind))
        cursor += n
    return spans


def marked_layout(vocab, prompt=None, chunks=None, marker=None, essay_separator=False):
    """Expected token surfaces of an assembled input, built independently
    from the reference strings."""
    from aeslab.corpus import tokenize

    out = []
    if prompt is not None:
        out.append("[PROMPT]")
        out.extend(tokenize(prompt, vocab).surfaces())
        if essay_separator:
            out.append("[ESSAY]")
    for chunk in chunks or []:
        if marker is not None:
            out.append(marker)
        out.extend(tokenize(chunk, vocab).surfaces())
    return out
