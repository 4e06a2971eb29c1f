"""This script converts the raw CoNaLa files into the JSON-lines dataset format
read by retroseq.

The curated files (conala-train.json, conala-test.json) are JSON arrays of
records with an ``intent``, an optional ``rewritten_intent`` and a
``snippet``. The mined file (conala-mined.jsonl) holds one record per line with
a ``prob`` field giving the confidence of the mined pair. Mined pairs are
usually only added to the database pool, so low confidence pairs can be
dropped with ``--min-prob``.

Usage::

    python convert_conala.py conala-train.json train.jsonl
    python convert_conala.py conala-mined.jsonl pool.jsonl --min-prob 0.5

The CoNaLa corpus is available from https://conala-corpus.github.io.
"""
from __future__ import annotations

import argparse

from monty.serialization import loadfn
from tqdm import tqdm

from retroseq.pipeline.data import write_pairs
from retroseq.util import load_jsonl

parser = argparse.ArgumentParser(description="convert CoNaLa files to JSON-lines")
parser.add_argument("filename", help="conala-*.json array or conala-mined.jsonl file")
parser.add_argument("out", help="output JSON-lines file")
parser.add_argument(
    "--min-prob", type=float, default=0.0, help="drop mined pairs below this confidence"
)
args = parser.parse_args()

if args.filename.endswith(".jsonl"):
    records = load_jsonl(args.filename)
else:
    records = loadfn(args.filename)

pairs = []
skipped = 0
for record in tqdm(records, desc="convert"):
    intent = record.get("rewritten_intent") or record.get("intent")
    snippet = record.get("snippet")
    if not intent or not snippet or record.get("prob", 1.0) < args.min_prob:
        skipped += 1
        continue
    pairs.append((intent.strip(), snippet.strip()))

write_pairs(args.out, pairs)

print(f"total pairs written: {len(pairs)}")
print(f"total pairs skipped: {skipped}")
