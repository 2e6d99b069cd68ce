"""kecae: key-exchange convolutional auto-encoder toolkit.

Trains an auto-encoder that splits each image's latent code into a key
(class-carrying) part and an unrelated (background) part, swaps key codes
between a class-0/class-2 input pair to synthesize new labelled images, and
measures whether the synthesized images help a downstream classifier.
"""

__version__ = "0.1.0"
