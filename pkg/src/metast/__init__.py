"""Adaptive self-training for few-shot sequence labeling, in numpy."""
from .labels import LabelScheme, SchemeError, Span, TaggedSentence, bio_decode, bio_encode, phrase_f1
from .model import TaggerParams, TaggerShape, Vocab, forward, init_params, value_and_grad
from .data import Dataset, SynthSpec, generate_synthetic, kshot_sample, parse_conll, read_conll
from .reweight import ConfigError, finalize_weights, meta_token_scores
from .selftrain import RunRecord, TrainConfig, run_metast

__version__ = "0.1.0"
