"""Regenerates toy_corpus.txt: sentences from a small stochastic grammar
over pseudo-words with Zipf-distributed word choice."""

import random

SEED = 20141
SYLLABLES = ["ka", "lo", "mi", "ren", "tu", "sa", "vel", "do", "ri", "pan",
             "or", "ex", "mu", "ti", "ga", "ne", "bor", "li", "zu", "fa"]


def words(rng, n, used):
    out = []
    while len(out) < n:
        w = "".join(rng.choice(SYLLABLES) for _ in range(rng.randint(1, 3)))
        if w not in used:
            used.add(w)
            out.append(w)
    return out


def zipf_choice(rng, items, s=1.1):
    weights = [1.0 / (i + 1) ** s for i in range(len(items))]
    return rng.choices(items, weights=weights)[0]


def main():
    rng = random.Random(SEED)
    used = set()
    det = ["the", "a", "this", "every", "some"]
    used.update(det)
    nouns = words(rng, 160, used)
    verbs = words(rng, 90, used)
    adjs = words(rng, 60, used)
    preps = ["in", "on", "with", "near", "under", "of"]
    used.update(preps)
    advs = words(rng, 20, used)

    def np():
        out = [zipf_choice(rng, det)]
        if rng.random() < 0.4:
            out.append(zipf_choice(rng, adjs))
        out.append(zipf_choice(rng, nouns))
        if rng.random() < 0.2:
            out += [zipf_choice(rng, preps)] + np()
        return out

    def sentence():
        out = np() + [zipf_choice(rng, verbs)]
        if rng.random() < 0.7:
            out += np()
        if rng.random() < 0.25:
            out.append(zipf_choice(rng, advs))
        return " ".join(out)

    lines, size = [], 0
    while size < 100_000:
        s = sentence()
        lines.append(s)
        size += len(s) + 1
    with open("toy_corpus.txt", "w") as f:
        f.write("\n".join(lines) + "\n")


if __name__ == "__main__":
    main()
