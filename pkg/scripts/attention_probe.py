"""Train the small model on synthetic data and locate its attention peak on N2 probes.

Each probe is a synthetic N2 epoch with one K-complex and spindle at a known
time. For every probe the token with the largest incoming attention is
printed per head and for the head mean, next to the event's token span.
"""
import argparse

import numpy as np

from msacnn.dataset import generate_synthetic, n2_probe_epoch
from msacnn.model import build, make_config, save_checkpoint
from msacnn.tcm import trace_from_weights
from msacnn.trainer import TrainConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--train-epochs", type=int, default=100)
    ap.add_argument("--size", choices=("small", "large"), default="small")
    ap.add_argument("--probes", type=int, default=8)
    ap.add_argument("--first-probe-seed", type=int, default=100)
    ap.add_argument("--checkpoint", default=None, help="optional path to save the trained model")
    args = ap.parse_args()

    cfg = make_config(args.size, "multivariate", 4)
    model, hist = train(build(cfg, seed=0), generate_synthetic(0, 6, 40, 4),
                        TrainConfig.for_model(cfg, epochs=args.train_epochs, seed=0))
    print(f"final train accuracy {hist.train_accuracy[-1]:.3f}")
    if args.checkpoint:
        save_checkpoint(model, args.checkpoint)
    model = model.astype(np.float64)
    token_s = cfg.scale_plan.p_tot / 100.0
    hits = 0
    for s in range(args.first_probe_seed, args.first_probe_seed + args.probes):
        epoch, (start, end) = n2_probe_epoch(s, 4)
        weights = model.attention_weights(epoch)[0]
        per_head = [trace_from_weights(weights, h).argmax_incoming for h in range(weights.shape[0])]
        mean = trace_from_weights(weights, None).argmax_incoming
        inside = start / token_s - 2 <= mean <= end / token_s + 2
        hits += inside
        print(f"probe {s}: event tokens {start / token_s:.1f}-{end / token_s:.1f}, "
              f"head argmax {per_head}, mean {mean} ({mean * token_s:.2f} s) {'hit' if inside else 'miss'}")
    print(f"{hits}/{args.probes} probes inside the event span +- 2 tokens")


if __name__ == "__main__":
    main()
