"""SCORER + CBR change captioning on a synthetic change-world."""

import json

from ._scorer import (
    ConfigError,
    ShapeError,
    bleu4,
    evaluate,
    generate_dataset_jsonl,
    gradcheck,
    gradcheck_cases,
    info_nce,
    mtm_similarity,
    preset,
    tm_similarity,
    train,
    vocabulary,
    write_dataset,
)


def generate_dataset(count, seed, **kwargs):
    """Scene pairs as dicts, one per JSON line of the dataset format."""
    return [json.loads(line) for line in generate_dataset_jsonl(count, seed, **kwargs)]


__all__ = [
    "ConfigError",
    "ShapeError",
    "bleu4",
    "evaluate",
    "generate_dataset",
    "generate_dataset_jsonl",
    "gradcheck",
    "gradcheck_cases",
    "info_nce",
    "mtm_similarity",
    "preset",
    "tm_similarity",
    "train",
    "vocabulary",
    "write_dataset",
]
