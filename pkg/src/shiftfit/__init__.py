"""Joint multi-task drift-diffusion / HMM / latent-factor modeling toolkit."""

__version__ = "0.1.0"
