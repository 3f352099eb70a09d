"""Risk distribution matching for domain generalisation.

Per-sample risks are computed for each training domain and the RBF-kernel
MMD between each domain's risk distribution and the pooled one is added to
the training loss.  Everything runs on numpy with a small reverse-mode
autodiff tape.
"""

__version__ = "0.1.0"
