"""Summary-focused multi-task pre-training for neural code summarization.

A desk-scale pipeline: corpus ingestion and action-word tables, a BPE
vocabulary, attention-mask construction, a small transformer encoder
pre-trained on action-word prediction plus summary-focused unidirectional
and masked language modeling, decoder fine-tuning with beam search, and
an evaluation harness (BLEU, METEOR, ROUGE-L, Wilcoxon, length buckets).
"""

__version__ = "0.1.0"
