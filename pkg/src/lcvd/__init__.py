"""Out-of-distribution detection by finetuning on cross-class vicinity samples.

A compact softmax MLP is pretrained on in-distribution data, then finetuned to
reject mixtures of training inputs labelled with complementary labels.
"""

__version__ = "0.1.0"
