"""Turns a directory of raw address texts into tokenized corpus splits.

Punctuation is split off into separate tokens, case is preserved, and
addresses are taken newest-first until the token budget is reached. The
concatenated stream (in chronological order) is cut into train/valid/test.
"""
import pathlib
import re
import sys

TOTAL_TOKENS = 1_000_000
VALID_TOKENS = 25_000
TEST_TOKENS = 25_000

PUNCT = re.compile(r"([.,;:!?()\[\]\"{}]|--)")


def tokenize(text):
    text = text.replace("’", "'").replace("“", '"').replace("”", '"')
    return PUNCT.sub(r" \1 ", text).split()


def main(src, dst):
    files = sorted(pathlib.Path(src).glob("*.txt"))
    chosen, total = [], 0
    for path in reversed(files):
        toks = tokenize(path.read_text(encoding="utf-8", errors="replace"))
        chosen.append(toks)
        total += len(toks)
        if total >= TOTAL_TOKENS:
            break
    stream = [t for toks in reversed(chosen) for t in toks][-TOTAL_TOKENS:]
    n_train = len(stream) - VALID_TOKENS - TEST_TOKENS
    splits = {
        "train": stream[:n_train],
        "valid": stream[n_train:n_train + VALID_TOKENS],
        "test": stream[n_train + VALID_TOKENS:],
    }
    out = pathlib.Path(dst)
    for name, toks in splits.items():
        # one line per 100 tokens keeps the files diffable
        lines = (" ".join(toks[i:i + 100]) for i in range(0, len(toks), 100))
        (out / f"{name}.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
        print(f"{name}: {len(toks)} tokens")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
