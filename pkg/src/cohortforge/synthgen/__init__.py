from .generate import Corpus, SynthConfig, generate, generate_to, write_corpus
from .oracle import oracle_extract, oracle_pipeline
from .rng import Stream

__all__ = ["Corpus", "Stream", "SynthConfig", "generate", "generate_to", "oracle_extract",
           "oracle_pipeline", "write_corpus"]
