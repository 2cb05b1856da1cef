"""Desk-scale essay-scoring laboratory.

Subpackages:
  corpus     data model, tokenisation, dataset readers, span/label codecs
  tensor     float64 reverse-mode autodiff substrate and checkpoint format
  optim      Adam, RMSProp, L2 penalty, gradient clipping, weight averaging
  encoder    embedding + BiLSTM + window-restricted self-attention backbone
  crf        linear-chain CRF: potentials, partition function, Viterbi
  segmenter  discourse-unit and argument-component span labellers
  augment    context assembly, count features, per-set score scaling
  scorer     essay scorer: losses, QWK, composite head, CV training
  cli        command-line entry points
"""

__version__ = "0.1.0"
