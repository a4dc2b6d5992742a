# Denoised and aligned multi-modal recommendation

__version__ = "1.0.0"
