"""camseg: semantic-mask generation via continuous latent embeddings, a
masked bidirectional transformer, and a per-position diffusion head."""

__version__ = "0.1.0"
