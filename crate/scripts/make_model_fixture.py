#!/usr/bin/env python3
"""Generate a forward-pass conformance fixture from the reference GPT-2 model.

Usage:
    python3 scripts/make_model_fixture.py --out crates/core/tests/data

Builds a small randomly initialised `transformers.GPT2Model`, perturbs every
parameter (so biases and layer-norm gains are non-trivial), writes it with
the same archive writer as `convert_gpt2.py`, and records reference
activations for a few prompts:

    model_fixture.safetensors   the converted weights
    model_fixture.json          config, prompts, hidden states, attention
                                patterns, sampled logits and argmax ids
"""
import argparse
import json
import os
import sys

import torch

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))
from convert_gpt2 import write_archive  # noqa: E402

CONFIG = dict(n_layer=2, n_embd=16, n_head=2, n_positions=32, vocab_size=1000)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", required=True)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    from transformers import GPT2Config, GPT2Model

    torch.manual_seed(args.seed)
    cfg = GPT2Config(
        **CONFIG,
        activation_function="gelu_new",
        layer_norm_epsilon=1e-5,
        bos_token_id=0,
        eos_token_id=0,
        resid_pdrop=0.0,
        embd_pdrop=0.0,
        attn_pdrop=0.0,
        attn_implementation="eager",
    )
    model = GPT2Model(cfg).eval()
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.3 * torch.randn_like(p))

    gen = torch.Generator().manual_seed(args.seed + 1)
    prompts = [
        [7],
        torch.randint(0, CONFIG["vocab_size"], (5,), generator=gen).tolist(),
        torch.randint(0, CONFIG["vocab_size"], (13,), generator=gen).tolist(),
        torch.randint(0, CONFIG["vocab_size"], (32,), generator=gen).tolist(),
    ]
    probe_ids = sorted(torch.randperm(CONFIG["vocab_size"], generator=gen)[:48].tolist())

    cases = []
    wte = model.wte.weight
    with torch.no_grad():
        for ids in prompts:
            out = model(
                torch.tensor([ids]),
                output_hidden_states=True,
                output_attentions=True,
            )
            hs = out.hidden_states
            # hidden_states[l + 1] is the residual stream after block l, except
            # the last entry, which already has ln_f applied.
            resid = [hs[l + 1][0].tolist() for l in range(CONFIG["n_layer"] - 1)]
            logits = out.last_hidden_state[0] @ wte.T
            cases.append(
                {
                    "ids": ids,
                    "resid_post": resid,
                    "attention": [a[0].tolist() for a in out.attentions],
                    "logits_at_probe_ids": logits[:, probe_ids].tolist(),
                    "argmax": logits.argmax(dim=-1).tolist(),
                }
            )

    os.makedirs(args.out, exist_ok=True)
    write_archive(model, os.path.join(args.out, "model_fixture.safetensors"))
    doc = {
        "config": {
            "n_layers": CONFIG["n_layer"],
            "d_model": CONFIG["n_embd"],
            "n_heads": CONFIG["n_head"],
            "d_head": CONFIG["n_embd"] // CONFIG["n_head"],
            "d_mlp": 4 * CONFIG["n_embd"],
            "n_ctx": CONFIG["n_positions"],
            "vocab_size": CONFIG["vocab_size"],
            "layer_norm_eps": 1e-5,
        },
        "probe_ids": probe_ids,
        "cases": cases,
    }
    with open(os.path.join(args.out, "model_fixture.json"), "w") as f:
        json.dump(doc, f)
    print(f"wrote {len(cases)} cases to {args.out}")


if __name__ == "__main__":
    main()
