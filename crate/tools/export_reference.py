#!/usr/bin/env python3
"""Export reference activations from the Hugging Face `transformers` implementation.

Three modes:

  fixtures   build the tiny random GPT-2 / GPT-NeoX checkpoints used by the Rust
             test-suite and record their logits, attention outputs and block
             outputs for a few fixed token sequences.

  tokenizer  encode a fixed text corpus with the reference GPT-2 tokenizer.

  golden     load a real checkpoint directory (config.json, model.safetensors,
             vocab.json, merges.txt) and record final-position logits for the
             fixed arithmetic prompts used by the parity acceptance check.

Everything runs in float32 on CPU.
"""

import argparse
import json
import os

import torch
from transformers import (
    GPT2Config,
    GPT2LMHeadModel,
    GPT2Tokenizer,
    GPTNeoXConfig,
    GPTNeoXForCausalLM,
    AutoModelForCausalLM,
)

PARITY_PROMPTS = [
    "Please calculate 306 + 136 =",
    "Please calculate 78 + 62 =",
    "Please calculate 78 - 62 =",
    "Please calculate 12 + 7 =",
    "Please calculate 75 + 16 - 48 =",
]

FIXTURE_SEQUENCES = [
    [3, 7, 1],
    [0, 15, 2, 2, 9, 4, 11],
    [5],
    [1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12],
]


def capture(model, blocks, attn_of, tokens):
    attn_out, block_out = {}, {}
    hooks = []
    for i, block in enumerate(blocks):
        hooks.append(
            attn_of(block).register_forward_hook(
                lambda _m, _i, out, i=i: attn_out.__setitem__(i, out[0].detach().clone())
            )
        )
        hooks.append(
            block.register_forward_hook(
                lambda _m, _i, out, i=i: block_out.__setitem__(
                    i, (out[0] if isinstance(out, tuple) else out).detach().clone()
                )
            )
        )
    with torch.no_grad():
        logits = model(torch.tensor([tokens])).logits[0]
    for h in hooks:
        h.remove()
    n = len(blocks)
    return {
        "tokens": tokens,
        "logits": logits.tolist(),
        "attention_outputs": [attn_out[i][0].tolist() for i in range(n)],
        "block_outputs": [block_out[i][0].tolist() for i in range(n)],
    }


def export_fixtures(out_dir):
    torch.manual_seed(0)
    gpt2 = GPT2LMHeadModel(
        GPT2Config(
            vocab_size=16,
            n_positions=32,
            n_embd=8,
            n_layer=2,
            n_head=2,
            activation_function="gelu_new",
            initializer_range=0.4,
            resid_pdrop=0.0,
            embd_pdrop=0.0,
            attn_pdrop=0.0,
        )
    ).eval()
    with torch.no_grad():
        for name, p in gpt2.named_parameters():
            if name.endswith("bias") or ".ln_" in name or "ln_f" in name:
                p.add_(0.1 * torch.randn_like(p))
    write_fixture(
        os.path.join(out_dir, "tiny_gpt2"),
        gpt2,
        gpt2.transformer.h,
        lambda b: b.attn,
    )

    torch.manual_seed(1)
    neox = GPTNeoXForCausalLM(
        GPTNeoXConfig(
            vocab_size=16,
            hidden_size=8,
            num_hidden_layers=2,
            num_attention_heads=2,
            intermediate_size=32,
            rotary_pct=0.5,
            rotary_emb_base=10000,
            max_position_embeddings=32,
            use_parallel_residual=True,
            hidden_act="gelu",
            initializer_range=0.4,
            layer_norm_eps=1e-5,
            tie_word_embeddings=False,
            attention_dropout=0.0,
            hidden_dropout=0.0,
        )
    ).eval()
    with torch.no_grad():
        for name, p in neox.named_parameters():
            if name.endswith("bias") or "layernorm" in name or "layer_norm" in name:
                p.add_(0.1 * torch.randn_like(p))
    write_fixture(
        os.path.join(out_dir, "tiny_neox"),
        neox,
        neox.gpt_neox.layers,
        lambda b: b.attention,
    )


def write_fixture(path, model, blocks, attn_of):
    os.makedirs(path, exist_ok=True)
    model.save_pretrained(path, safe_serialization=True)
    golden = [capture(model, blocks, attn_of, seq) for seq in FIXTURE_SEQUENCES]
    with open(os.path.join(path, "reference.json"), "w") as f:
        json.dump({"sequences": golden}, f)
    for extra in ("generation_config.json",):
        p = os.path.join(path, extra)
        if os.path.exists(p):
            os.remove(p)


def export_golden(model_dir, out_path):
    tok = GPT2Tokenizer(
        os.path.join(model_dir, "vocab.json"), os.path.join(model_dir, "merges.txt")
    )
    model = AutoModelForCausalLM.from_pretrained(model_dir, torch_dtype=torch.float32).eval()
    entries = []
    for prompt in PARITY_PROMPTS:
        ids = tok.encode(prompt)
        with torch.no_grad():
            logits = model(torch.tensor([ids])).logits[0, -1]
        entries.append({"prompt": prompt, "tokens": ids, "logits": logits.tolist()})
    with open(out_path, "w") as f:
        json.dump({"prompts": entries}, f)


def export_tokenizer(vocab, merges, out_path):
    import random

    tok = GPT2Tokenizer(vocab, merges)
    rng = random.Random(1234)
    alphabet = [chr(c) for c in range(32, 127)] + ["\n", "\t"]
    texts = [
        "",
        "Please calculate 306 + 136 =",
        "Please calculate 75 + 16 - 48 =",
        " 442",
        " 9999",
        "Hello world! It's 3.5 degrees, isn't it?   Yes.\n\nNew paragraph\t tab",
        "naïve café — 東京 🙂",
        "   leading and trailing spaces   ",
    ]
    texts += ["".join(rng.choice(alphabet) for _ in range(rng.randint(1, 40))) for _ in range(300)]
    cases = [{"text": t, "ids": tok.encode(t)} for t in texts]
    with open(out_path, "w") as f:
        json.dump({"cases": cases}, f, ensure_ascii=False)


def main():
    ap = argparse.ArgumentParser()
    sub = ap.add_subparsers(dest="cmd", required=True)
    fx = sub.add_parser("fixtures")
    fx.add_argument("--out", required=True)
    gd = sub.add_parser("golden")
    gd.add_argument("--model-dir", required=True)
    gd.add_argument("--out", required=True)
    tk = sub.add_parser("tokenizer")
    tk.add_argument("--vocab", required=True)
    tk.add_argument("--merges", required=True)
    tk.add_argument("--out", required=True)
    args = ap.parse_args()
    if args.cmd == "fixtures":
        export_fixtures(args.out)
    elif args.cmd == "tokenizer":
        export_tokenizer(args.vocab, args.merges, args.out)
    else:
        export_golden(args.model_dir, args.out)


if __name__ == "__main__":
    main()
