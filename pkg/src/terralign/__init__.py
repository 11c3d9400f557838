"""terralign: desk-scale contrastive pre-training for off-road driving.

Three encoder branches (terrain image, control actions, locomotion states)
are trained so the fused image+action embedding aligns with the locomotion
embedding, then evaluated with cross-modal retrieval and dynamics-prediction
harnesses on a synthetic driving corpus.
"""

__version__ = "0.1.0"
