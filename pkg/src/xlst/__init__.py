"""Zero-shot cross-lingual transfer at toy scale: bilingual task fitting (MLM on a
balanced bilingual mix) followed by soft/hard self-training with a voter ensemble
and automatic confidence-threshold selection."""

__version__ = "0.1.0"
