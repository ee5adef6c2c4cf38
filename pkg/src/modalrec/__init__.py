"""Multi-modal multi-domain sequential recommender.

Content features from several modalities are whitened by mixture-of-experts
projectors, encoded by a shared causal transformer over both single-domain
sequences and the cross-domain mixed behavior flow, pre-trained with two
contrastive objectives, and fine-tuned on a target domain with item-id
embeddings and a fused two-head prediction.
"""

__version__ = "0.1.0"
