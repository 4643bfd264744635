"""
Anatomy of a few-shot episode
=============================

Samples one 5-way 1-shot episode, embeds its windows and prints the
encoded sequence the meta-learner reads: one column per support example,
each carrying a one-hot label block, followed by the query column whose
label block is all zeros.

    python demos/episode_anatomy.py --n 5 --k 2
"""

import argparse

import numpy as np

from fshgr.data import SynthSpec, synthesize
from fshgr.episodes import build_meta_split, decode_labels, encode_task, sample_episodes
from fshgr.layers import EmbeddingConfig, ModelConfig, channel_plan, embed, init_params, tcn_dilations

parser = argparse.ArgumentParser(description=__doc__.split("\n")[1])
parser.add_argument("--n", type=int, default=5)
parser.add_argument("--k", type=int, default=1)
parser.add_argument("--seed", type=int, default=0)
args = parser.parse_args()

spec = SynthSpec(n_subjects=6, n_gestures=8, duration_s=1.0)
split = build_meta_split({r.key: r for r in synthesize(spec, seed=args.seed)}, "new-subjects")
episode = sample_episodes(split.meta_train, 1, args.n, args.k, seed=args.seed)[0]

print(f"{args.n}-way {args.k}-shot episode, sequence length {args.n * args.k + 1}")
print("slot -> gesture:", dict(enumerate(episode.slot_gestures)))
for pos, (subject, gesture, rep, window) in enumerate(episode.provenance):
    role = "query  " if pos == len(episode.provenance) - 1 else "support"
    print(f"  position {pos:2d} {role} subject={subject} gesture={gesture} rep={rep} window={window}")
print(f"query slot {episode.query_label} (gesture {episode.slot_gestures[episode.query_label]})")

cfg = ModelConfig(n_way=args.n, k_shot=args.k, embedding=EmbeddingConfig(kind="fc"))
params = init_params(cfg)
encoded = encode_task(episode, lambda w: embed(w, cfg.embedding, params))
print(f"\nencoded sequence: {encoded.shape[0]} channels x {encoded.shape[1]} positions")
np.set_printoptions(linewidth=120)
print("label rows (slots x positions):")
print(encoded.data[-args.n:].astype(int))
assert np.array_equal(decode_labels(encoded, args.n), episode.support_labels)

# Channel count grows as attention and temporal blocks append their outputs.
print(f"\ndilations per temporal conv net: {tcn_dilations(cfg.seq_len)}")
for name, channels in channel_plan(cfg):
    print(f"  {name:10s} {channels}")
