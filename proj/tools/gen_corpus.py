#!/usr/bin/env python3
# SPDX-License-Identifier: Apache-2.0
"""Writes the deterministic desk-scale training corpus (plain ASCII, ~1 MB)."""

import argparse
import random

NOUNS = ("river town garden house ship lantern road market harbor mill forest window letter bridge field "
         "kettle clock winter summer captain farmer sister brother stranger teacher doctor baker sailor "
         "widow child horse dog merchant soldier mountain valley storm candle book door table").split()
ADJS = ("old quiet bright cold small silent distant narrow green heavy gentle dark crooked tall "
        "weary patient careful proud sudden ancient").split()
VERBS = ("watched crossed opened followed carried remembered found left called kept mended "
         "answered passed reached praised doubted").split()
INTRANS = ("waited slept laughed wandered listened trembled returned vanished spoke rested").split()
PLACES = ("by the river", "at the market", "near the old mill", "under the bridge", "across the field",
          "in the garden", "on the road", "beside the harbor", "behind the house", "through the forest")
TIMES = ("In the morning", "At dusk", "Before the storm", "That winter", "Long ago", "After supper",
         "When the clock struck nine", "On the first day of summer")
NAMES = "Anna Thomas Margaret Edwin Clara Jonas Helen Peter Ruth Samuel".split()
SPEECH = ("said", "asked", "whispered", "replied", "cried")


def noun_phrase(r):
    if r.random() < 0.5:
        return f"the {r.choice(ADJS)} {r.choice(NOUNS)}"
    return f"the {r.choice(NOUNS)}"


def subject(r):
    return r.choice(NAMES) if r.random() < 0.4 else noun_phrase(r)


def sentence(r):
    k = r.random()
    if k < 0.3:
        s = f"{subject(r)} {r.choice(VERBS)} {noun_phrase(r)} {r.choice(PLACES)}"
    elif k < 0.5:
        s = f"{r.choice(TIMES)}, {subject(r)} {r.choice(INTRANS)} {r.choice(PLACES)}"
    elif k < 0.7:
        s = f"{subject(r)} {r.choice(INTRANS)}, and {subject(r)} {r.choice(VERBS)} {noun_phrase(r)}"
    elif k < 0.85:
        q = f"{noun_phrase(r)} {r.choice(INTRANS)} {r.choice(PLACES)}"
        s = f"\"{q[0].upper() + q[1:]},\" {r.choice(SPEECH)} {r.choice(NAMES)}"
    else:
        s = f"{subject(r)} was {r.choice(ADJS)}, for {noun_phrase(r)} had {r.choice(VERBS)} {noun_phrase(r)}"
    return s[0].upper() + s[1:] + "."


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", required=True)
    ap.add_argument("--bytes", type=int, default=1_000_000)
    ap.add_argument("--seed", type=int, default=1)
    a = ap.parse_args()
    r = random.Random(a.seed)
    parts, size = [], 0
    while size < a.bytes:
        para = " ".join(sentence(r) for _ in range(r.randint(3, 7))) + "\n\n"
        parts.append(para)
        size += len(para)
    with open(a.out, "w", encoding="ascii") as f:
        f.write("".join(parts))


if __name__ == "__main__":
    main()
