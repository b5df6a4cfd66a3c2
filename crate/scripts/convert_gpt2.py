#!/usr/bin/env python3
"""Convert a Hugging Face GPT-2 checkpoint into a probesteer weights directory.

Usage:
    python3 scripts/convert_gpt2.py --source gpt2 --preset gpt2-small --out weights/
    python3 scripts/convert_gpt2.py --source /path/to/local/gpt2-large --preset gpt2-large --out weights/

Writes:
    <out>/<preset>/model.safetensors   float32 GPT2Model tensors
    <out>/<preset>/vocab.json          tokenizer vocabulary
    <out>/<preset>/merges.txt          BPE merge rules

`--source` is anything `transformers.GPT2Model.from_pretrained` accepts
(a hub id such as gpt2, gpt2-medium, gpt2-large, or a local directory).
Point PROBESTEER_WEIGHTS_DIR at <out> afterwards.
"""
import argparse
import os
import shutil

import torch
from safetensors.torch import save_file

PRESETS = {
    "gpt2-small": (12, 768),
    "gpt2-medium": (24, 1024),
    "gpt2-large": (36, 1280),
}

BLOCK_TENSORS = [
    "ln_1.weight", "ln_1.bias",
    "attn.c_attn.weight", "attn.c_attn.bias",
    "attn.c_proj.weight", "attn.c_proj.bias",
    "ln_2.weight", "ln_2.bias",
    "mlp.c_fc.weight", "mlp.c_fc.bias",
    "mlp.c_proj.weight", "mlp.c_proj.bias",
]


def archive_tensors(model):
    """The tensors the loader expects, float32 and contiguous."""
    state = model.state_dict()
    state = {k[len("transformer."):] if k.startswith("transformer.") else k: v for k, v in state.items()}
    n_layer = model.config.n_layer
    names = ["wte.weight", "wpe.weight", "ln_f.weight", "ln_f.bias"]
    names += [f"h.{i}.{t}" for i in range(n_layer) for t in BLOCK_TENSORS]
    return {n: state[n].detach().to(torch.float32).contiguous() for n in names}


def write_archive(model, path):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    save_file(archive_tensors(model), path)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--source", required=True)
    ap.add_argument("--preset", required=True, choices=sorted(PRESETS))
    ap.add_argument("--out", required=True)
    args = ap.parse_args()

    from transformers import GPT2Model, GPT2Tokenizer

    model = GPT2Model.from_pretrained(args.source)
    n_layer, d_model = PRESETS[args.preset]
    if (model.config.n_layer, model.config.n_embd) != (n_layer, d_model):
        raise SystemExit(
            f"{args.source} has {model.config.n_layer} layers / d_model {model.config.n_embd}, "
            f"but {args.preset} expects {n_layer} / {d_model}"
        )
    target = os.path.join(args.out, args.preset)
    write_archive(model, os.path.join(target, "model.safetensors"))

    tok = GPT2Tokenizer.from_pretrained(args.source)
    saved = tok.save_vocabulary(target)
    for f in saved:
        base = os.path.basename(f)
        if base not in ("vocab.json", "merges.txt"):
            shutil.move(f, os.path.join(target, "vocab.json" if f.endswith(".json") else "merges.txt"))
    print(f"wrote {target}")


if __name__ == "__main__":
    main()
