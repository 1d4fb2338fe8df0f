"""Physics-informed operator learning for acoustically driven bubble dynamics.

Subpackages: physics (governing equations), integrate (RK5(4)7M), datagen
(corpus generation + storage), autodiff/network (self-contained neural core),
training (losses and training loops), spectral (FFT diagnostics and study
harness), cli (command-line pipelines).
"""

__version__ = "0.1.0"
