#!/usr/bin/env python3
"""Generate the tokenizer conformance fixture with the reference GPT-2 tokenizer.

Usage:
    python3 scripts/make_tokenizer_fixture.py \
        --vocab crates/core/assets/gpt2/vocab.json \
        --merges crates/core/assets/gpt2/merges.txt \
        --out crates/core/tests/data/tokenizer_fixture.json

Uses the pure-Python `transformers.GPT2Tokenizer`, which ports the original
encoder.py byte-level BPE exactly.
"""
import argparse
import json

from transformers import GPT2Tokenizer

STRINGS = [
    "Hello world",
    "Hello, world!",
    "The engineer solved the problem efficiently",
    " The engineer solved the problem efficiently",
    "Women are too emotional to be CEOs",
    "Women are not suitable for",
    "Men should always be the ones who",
    "People from that group are naturally",
    "I'm sure you'll see it's not what we'd 've done",
    "DON'T SHOUT, it's RUDE",
    "She said: \"don't\" and 'won't'.",
    "   leading spaces",
    "trailing spaces   ",
    "multiple    internal     spaces",
    "tabs\tand\ttabs",
    "line one\nline two\n\nline four",
    "\n\n\n",
    " ",
    "a",
    "1234567890",
    "3.14159 is pi, 2.71828 is e",
    "In 1998, about 42% of the 10000 people",
    "$100.00 or €85,50 or ¥12000",
    "email: someone@example.com",
    "https://www.example.org/path?query=1&x=y",
    "naïve café résumé façade",
    "Größe, Straße, über",
    "Ελληνικά κείμενα",
    "Русский текст для проверки",
    "中文字符测试",
    "日本語のテキスト",
    "한국어 텍스트",
    "عربى نص",
    "emoji 😀🎉👍 and more 🚀",
    "mixed😀letters",
    "<|endoftext|> is a literal here",
    "snake_case_identifier and camelCaseIdentifier",
    "fn main() { println!(\"hi\"); }",
    "x = [1, 2, 3]; y = {'a': 1}",
    "---===***###",
    "...!!!???",
    "The quick brown fox jumps over the lazy dog.",
    "antidisestablishmentarianism",
    "Supercalifragilisticexpialidocious",
    "GPT-2 uses byte-level BPE",
    "hook_resid_post and attn.hook_z",
    "blocks.16.hook_resid_post",
    "Tabs\t\tand\r\nCRLF line endings",
    "zero​width space",
    "non breaking space",
    "The retired teacher volunteers at the local food bank",
    "Poor people are poor because they are lazy",
    "The athlete who uses a wheelchair won the race",
    "co-operate, re-enter; well-known",
    "A" * 40,
    "ab" * 25,
]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--vocab", required=True)
    ap.add_argument("--merges", required=True)
    ap.add_argument("--out", required=True)
    args = ap.parse_args()

    tok = GPT2Tokenizer(args.vocab, args.merges)
    pairs = []
    for s in STRINGS:
        # Only ordinary text: the literal "<|endoftext|>" must not be mapped to 50256.
        ids = tok.convert_tokens_to_ids(tok.tokenize(s, split_special_tokens=True))
        assert tok.decode(ids, clean_up_tokenization_spaces=False) == s, s
        pairs.append({"text": s, "ids": ids})

    singles = []
    for i in [0, 11, 198, 220, 262, 383, 995, 15496, 18306, 50255, 30325, 10263]:
        singles.append({"id": i, "text": tok.decode([i], clean_up_tokenization_spaces=False)})

    with open(args.out, "w", encoding="utf-8") as f:
        json.dump({"pairs": pairs, "single_ids": singles}, f, ensure_ascii=False, indent=1)
        f.write("\n")
    print(f"wrote {len(pairs)} pairs, {len(singles)} single-id decodes")


if __name__ == "__main__":
    main()
