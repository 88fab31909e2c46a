"""countlab: rank-aware teacher selection and anchor-guided density counting.

The package is organised bottom up: annotations and count bins
(:mod:`countlab.datamodel`), nested crop groups (:mod:`countlab.patchgroup`),
text anchors (:mod:`countlab.anchors`), the probabilistic density head
(:mod:`countlab.densityhead`), losses and optimal transport
(:mod:`countlab.losses`, :mod:`countlab.ot`), encoders and teachers
(:mod:`countlab.encoders`), teacher selection (:mod:`countlab.rats`),
metrics, synthetic data and the end-to-end stages (:mod:`countlab.pipeline`).
"""

__version__ = "0.1.0"
