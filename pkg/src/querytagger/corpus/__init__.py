"""Queries, labels, title augmentation, dataset files and the synthetic corpus."""
from .augment import (Augmented, EncodedBatch, EncodedExample, TitleFetcher, attach_titles,
                      augment_with_titles, collate, encode_batch, encode_example, mask_batch,
                      mask_for_mlm, strip_titles)
from .io import (DatasetFormatError, read_conll, read_jsonl, write_conll, write_jsonl)
from .noise import corrupt_labels
from .schema import (IGNORE_INDEX, MASK_ID, PAD_ID, SEP, SEP_ID, UNK_ID, LabelScheme,
                     QueryExample, Vocabulary, categories_to_bio, is_well_formed, repair_bio,
                     split_tag, tag_categories, tokenize)
from .synthetic import GenConfig, Lexicon, SyntheticCorpus, build_lexicon, generate_synthetic_corpus

__all__ = [
    "Augmented", "DatasetFormatError", "EncodedBatch", "EncodedExample", "GenConfig",
    "IGNORE_INDEX", "LabelScheme", "Lexicon", "MASK_ID", "PAD_ID", "QueryExample", "SEP",
    "SEP_ID", "SyntheticCorpus", "TitleFetcher", "UNK_ID", "Vocabulary", "attach_titles",
    "augment_with_titles", "build_lexicon", "categories_to_bio", "collate", "corrupt_labels",
    "encode_batch", "encode_example", "generate_synthetic_corpus", "is_well_formed",
    "mask_batch", "mask_for_mlm", "read_conll", "read_jsonl", "repair_bio", "split_tag",
    "strip_titles", "tag_categories", "tokenize", "write_conll", "write_jsonl",
]
