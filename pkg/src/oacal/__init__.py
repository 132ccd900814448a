"""Output-adaptive weight quantization engine with desk-scale verification.

Modules by responsibility:

* linalg, archive  - dense float64 kernels and the bit-exact tensor format
* hessian          - agnostic/adaptive curvature accumulation, logistic oracle
* quant            - affine, double-quantized, and binary weight codecs
* calibrate        - Hessian-driven column calibration and outlier isolation
* tinylm           - toy byte-level transformer with manual backprop
* pipeline, cli    - end-to-end runs, alpha sweeps, reports, oracles
"""

__version__ = "0.1.0"
