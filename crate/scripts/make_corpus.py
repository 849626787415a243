"""Generate the bundled desk-scale corpus (deterministic)."""
import random
import sys

SUBJECTS = ["the farmer", "a small child", "the old sailor", "my neighbour", "the teacher", "a tired doctor",
            "the young engineer", "her brother", "the baker", "a quiet student", "the mayor", "our guide"]
VERBS = ["carried", "painted", "found", "repaired", "watched", "opened", "sold", "borrowed", "cleaned",
         "described", "measured", "planted", "built", "forgot", "returned", "followed"]
OBJECTS = ["the wooden boat", "a red lantern", "the garden gate", "an empty basket", "the kitchen table",
           "a heavy book", "the broken clock", "a bag of apples", "the narrow bridge", "a letter",
           "the iron kettle", "a field of wheat", "the village map", "a silver coin"]
PLACES = ["near the river", "in the morning", "after the storm", "behind the market", "before dinner",
          "on the hill", "during the winter", "at the station", "under the trees", "by the harbour"]
CONNECT = ["and then", "because", "while", "although", "so", "but"]
ADJ = ["bright", "cold", "quiet", "busy", "long", "warm", "strange", "simple", "green", "late"]
NOUNS = ["day", "road", "house", "school", "season", "week", "town", "evening"]


def clause(r):
    s = f"{r.choice(SUBJECTS)} {r.choice(VERBS)} {r.choice(OBJECTS)}"
    if r.random() < 0.6:
        s += f" {r.choice(PLACES)}"
    return s


def sentence(r):
    kind = r.random()
    if kind < 0.55:
        s = clause(r)
    elif kind < 0.85:
        s = f"{clause(r)} {r.choice(CONNECT)} {clause(r)}"
    else:
        s = f"it was a {r.choice(ADJ)} {r.choice(NOUNS)}"
    return s[0].upper() + s[1:] + r.choice([".", ".", ".", "!", "?"])


def main(path, size):
    r = random.Random(20240601)
    out, n = [], 0
    while n < size:
        para = " ".join(sentence(r) for _ in range(r.randint(3, 7))) + "\n\n"
        out.append(para)
        n += len(para)
    with open(path, "w", encoding="utf-8") as f:
        f.write("".join(out)[:size])


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "data/corpus.txt", int(sys.argv[2]) if len(sys.argv) > 2 else 160_000)
