"""Modular discrete speech-encoder features, desk scale.

Subpackages:

- ``numcore``: dense tensors, reverse-mode differentiation, optimizer
- ``nnet``: streaming attention blocks, recurrent cells, masks
- ``ctc``: CTC loss, oracle, greedy and prefix beam decoding
- ``transducer``: transducer loss, greedy and beam decoding
- ``lego``: discrete top-K feature export/import and cost accounting
- ``pipeline``: staged training (base, exporter, downstream) and stitching
- ``harness``: synthetic task generator, WER, modularity experiments
- ``appshell``: checkpoint container, run config, CLI
"""

__version__ = "0.1.0"
