"""Task-agnostic tile embeddings from elevation rasters.

Pipeline: raster ingest and tiling -> contrastive encoder pretraining ->
standardize/PCA/K-means distance embeddings -> area pooling -> downstream
regression benchmarks and cluster interpretation.
"""

__version__ = "0.1.0"
