#!/usr/bin/env python3
"""Generate the word-count corpus fixture and its reference counts.

The corpus is synthetic prose produced from a fixed seed, so it is free of
third-party copyright and can be regenerated bit-for-bit:

    python3 gen_corpus.py corpus.txt corpus_counts.json

The counts file is produced by a plain sequential counter in this script
(ASCII letter runs, lowercased) and is used as the reference output for the
distributed word-count job.
"""

import json
import random
import re
import sys

SEED = 20170626
TARGET_BYTES = 1_000_000

ONSETS = ["", "b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r",
          "s", "t", "v", "w", "th", "st", "br", "cl", "gr", "sh", "ch", "pr"]
NUCLEI = ["a", "e", "i", "o", "u", "ea", "ou", "ai", "ie", "oo"]
CODAS = ["", "", "n", "r", "s", "t", "l", "nd", "st", "ck", "ng", "rd"]
FUNCTION_WORDS = ["the", "a", "of", "and", "to", "in", "was", "he", "she",
                  "it", "that", "with", "for", "as", "on", "at", "by", "had"]
ODDITIES = ["café", "naïve", "Straße", "résumé",
            "don't", "o'clock", "x-ray", "e-mail", "1984", "C3PO", "Ångström"]


def make_lexicon(rng, size):
    words = set()
    while len(words) < size:
        n = rng.choice([1, 1, 2, 2, 2, 3, 3, 4])
        w = "".join(rng.choice(ONSETS) + rng.choice(NUCLEI) + rng.choice(CODAS)
                    for _ in range(n))
        words.add(w)
    words = sorted(words)
    rng.shuffle(words)
    return words


def generate(rng):
    lexicon = make_lexicon(rng, 12000)
    weights = [1.0 / (i + 1) ** 1.07 for i in range(len(lexicon))]
    out = []
    size = 0
    while size < TARGET_BYTES:
        line_words = []
        for _ in range(rng.randint(0, 14)):
            r = rng.random()
            if r < 0.35:
                w = rng.choice(FUNCTION_WORDS)
            elif r < 0.36:
                w = rng.choice(ODDITIES)
            else:
                w = rng.choices(lexicon, weights)[0]
            if rng.random() < 0.08:
                w = w.capitalize()
            if rng.random() < 0.01:
                w = w.upper()
            if rng.random() < 0.1:
                w += rng.choice([",", ".", ";", ":", "!", "?", "—"])
            line_words.append(w)
        line = " ".join(line_words)
        out.append(line)
        size += len(line.encode("utf-8")) + 1
    return "\n".join(out) + "\n"


def count(text):
    counts = {}
    for w in re.findall(r"[A-Za-z]+", text):
        w = w.lower()
        counts[w] = counts.get(w, 0) + 1
    return counts


def main():
    corpus_path, counts_path = sys.argv[1], sys.argv[2]
    text = generate(random.Random(SEED))
    with open(corpus_path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    with open(counts_path, "w", encoding="utf-8") as f:
        json.dump(count(text), f, sort_keys=True, separators=(",", ":"))
        f.write("\n")


if __name__ == "__main__":
    main()
