"""Cross-domain collaborative filtering with latent-linked variational autoencoders.

Two per-domain VAEs share their latent layer so that source-domain knowledge
flows into the target-domain decoder (never the reverse). Includes the
sparsity-weighted reconstruction loss, MMD latent alignment, cold-start and
auxiliary-information variants, and a leave-one-out ranking harness.
"""

__version__ = "0.1.0"
