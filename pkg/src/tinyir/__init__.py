"""tinyir: a desk-scale dense retriever you can train on a CPU.

A tiny decoder-only transformer is turned into a text embedder by
unsupervised contrastive training: positives are random crops of the same
document, negatives are BM25-mined lexical neighbours, and the loss is
InfoNCE over cosine similarities. Everything numeric runs on a small
tape-based autodiff layer over numpy, so every gradient in the stack can be
checked against finite differences.
"""

__version__ = "0.1.0"

from .corpus import Document, DocumentStore, Vocabulary, build_vocab, \
    ingest_jsonl, tokenize, detokenize
from .errors import TinyIRError, ParseError, ConflictError, DataError, \
    ContextOverflowError, ShapeError, NumericalError, ConfigError
from .sparse import BM25Params, build_index, bm25_score, search as bm25_search, \
    mine_all, mine_hard_negatives
from .model import ModelConfig, ModelParams, init_params, forward, embed_eos, \
    lm_loss, LoraAdapter, init_lora, apply_lora, merge_lora, save_checkpoint, \
    load_checkpoint
from .augment import AugmentationConfig, TrainingPair, random_crop, make_pair, \
    build_batches
from .training import TrainConfig, ContrastiveBatch, info_nce_loss, adamw_step, \
    train
from .retrieval import EmbeddingIndex, embed_corpus, search, ndcg_at_k, \
    recall_at_k, mrr, evaluate
