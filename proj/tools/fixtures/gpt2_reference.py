"""Pin GPT-2 token ids for tests/data/gpt2/reference_ids.jsonl.

Uses the transformers slow tokenizer on the checked-in vocab/merges.
"""
import json
import random
import sys

from transformers import GPT2Tokenizer

root = sys.argv[1]
tok = GPT2Tokenizer(f"{root}/vocab.json", f"{root}/merges.txt")

fixed = [
    "Hello world",
    "The quick brown fox jumps over the lazy dog.",
    "  multiple   spaces\n\nnewlines",
    "I've got 1234 apples, don't you?",
    "héllo wörld café",
    "日本語テキスト",
    "tab\there 3.14 ½ Ⅻ",
    "trailing spaces   ",
    " leading",
    "\n",
    "it's they're we'll I'd you've she'm IT'S",
    "''' quotes ''s",
    "emoji 😀👍🏽 end",
    "mixed123numbers456and789",
    "x = f(y) + g[z] * 2;",
    "Ελληνικά και русский текст",
    " non-breaking em space",
    "<|endoftext|>",
]

alphabet = (
    list("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789")
    + list(" \t\n\r'.,;:!?-()[]{}\"/\\@#$%^&*_+=~`|<>")
    + ["é", "ß", "ø", "ü", "ñ", "中", "文", "한", "ア", "й", "ω", "½", "²", "٣", " ", " ", "😀", "∑"]
)
rng = random.Random(1234)
for _ in range(200):
    n = rng.randint(1, 40)
    fixed.append("".join(rng.choice(alphabet) for _ in range(n)))

with open(f"{root}/reference_ids.jsonl", "w", encoding="utf-8") as out:
    for s in fixed:
        out.write(json.dumps({"text": s, "ids": tok.encode(s)}, ensure_ascii=False) + "\n")
