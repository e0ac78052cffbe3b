"""Decentralised GAN training over non-iid clients, simulated in one process.

Each client owns a private data distribution and a discriminator. A central
server owns the generator and combines the clients' judgments of generated
samples with forgiver-first rules (F2U, F2A) or baseline aggregations.
"""

__version__ = "0.1.0"
