"""sigeval - Social Signal Evaluation harness

Measures how well prompted language models track social signals in
thin-sliced clinical conversation transcripts.
"""

__version__ = "0.1.0"
__author__ = "sigeval Development Team"
__email__ = "sigeval@example.com"
