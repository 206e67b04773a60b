"""Task-conditioned infrared/visible image fusion.

A base fusion network is trained once on paired IR/VIS images; a lightweight
regulator then adapts its features to downstream tasks by injecting dynamic
prompts predicted from text-instruction embeddings, without retraining the
base network or the task heads.
"""

__version__ = "0.1.0"
