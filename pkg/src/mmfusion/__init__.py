"""Multi-modal, multi-task, multi-objective meme-classification framework.

Frozen backbone features go in as MMFS containers; trained fusion and
classification models, ablation reports, and visualization exports come out.
"""

__version__ = "0.1.0"
