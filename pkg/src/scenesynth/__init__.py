"""Two-step text-to-image synthesis: semantic layout generation, then
object-aware image generation, trained end to end on a procedural scene
dataset with exact ground truth.
"""

__version__ = "0.1.0"
