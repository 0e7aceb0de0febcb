#!/usr/bin/env python3
"""Generate data/corpus.txt: deterministic synthetic English prose.

The output is released under CC0 1.0. Every sentence comes from a small
grammar below, so the file carries no third-party text.
"""
import argparse
import random

NOUNS = """river lantern harbor garden window merchant sailor village mountain orchard
bridge teacher kitchen meadow letter engine forest candle market valley tower
shepherd island winter morning journey library painter farmer stranger signal
compass harvest ladder blanket whistle kettle thunder pebble feather mirror""".split()
ADJS = """quiet bright old narrow heavy gentle cold distant golden hollow silver
patient crooked early simple hidden steady broken warm faint clever""".split()
VERBS = """watched carried followed mended painted crossed opened counted remembered
found lifted visited guarded described answered measured gathered""".split()
INTRANS = """waited rested wandered listened laughed slept hurried returned
shivered sang paused glowed""".split()
PLACES = """by the river|near the old bridge|under the tower|across the valley|
inside the market|beyond the forest|at the edge of the meadow|along the harbor|
behind the library|on the mountain road""".replace("\n", "").split("|")
TIMES = """In the morning|Before the winter|After the harvest|At dusk|Long ago|
Every evening|During the storm|On the first day|Later that year|Once again""".replace("\n", "").split("|")
CONJ = ["and", "but", "because", "while", "until", "so"]
NAMES = "Ada Bram Cora Dell Edda Finn Greta Hale Iris Joss Kit Lena Milo Nell Oren Pia".split()


def noun_phrase(r):
    n = r.choice(NOUNS)
    if r.random() < 0.5:
        return "the " + r.choice(ADJS) + " " + n
    return "the " + n


def subject(r):
    return r.choice(NAMES) if r.random() < 0.4 else noun_phrase(r)


def clause(r):
    s = subject(r)
    if r.random() < 0.65:
        c = f"{s} {r.choice(VERBS)} {noun_phrase(r)}"
    else:
        c = f"{s} {r.choice(INTRANS)}"
    if r.random() < 0.4:
        c += " " + r.choice(PLACES)
    return c


def sentence(r):
    c = clause(r)
    if r.random() < 0.35:
        c += " " + r.choice(CONJ) + " " + clause(r)
    if r.random() < 0.3:
        c = r.choice(TIMES) + ", " + c
    c = c[0].upper() + c[1:]
    if r.random() < 0.1:
        c = '"' + c + '," said ' + r.choice(NAMES)
    return c + "."


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data/corpus.txt")
    ap.add_argument("--bytes", type=int, default=1_200_000)
    ap.add_argument("--seed", type=int, default=7)
    a = ap.parse_args()
    r = random.Random(a.seed)
    parts, size = [], 0
    while size < a.bytes:
        para = " ".join(sentence(r) for _ in range(r.randint(3, 8))) + "\n\n"
        parts.append(para)
        size += len(para)
    with open(a.out, "w", encoding="utf-8", newline="\n") as f:
        f.write("".join(parts))


if __name__ == "__main__":
    main()
