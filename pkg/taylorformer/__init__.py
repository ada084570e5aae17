"""
TaylorFormer is a desk-scale implementation of a multi-branch Transformer for
image dehazing, built on linear-time Taylor-expanded self-attention. Run
'taylorformer --help' for the command-line interface.
"""

import os

with open(os.path.join(os.path.dirname(__file__), "VERSION")) as version_file:
    __version__ = version_file.read().strip()
