"""Walk through the command line tools on a tiny synthetic corpus.

Writes everything into a temporary directory: captions, random patch and
token features, seeded weights. Then parses, grounds, infers scene graphs,
scores them against themselves and exports DOT files.

    python demos/end_to_end.py
"""

import json
import tempfile
from pathlib import Path

from captionpsg.cli import main
from captionpsg.numkit import SplitMix64
from captionpsg.tensorio import write_tensor
from captionpsg.textgraph import tokenize

CAPTIONS = [
    ("a#0", "a man riding a horse on the grass"),
    ("a#1", "a horse standing in a field"),
    ("b#0", "a dog sitting on a couch near a window"),
    ("c#0", "two people walking under the sky"),
]
D, TEXT_D = 8, 6


def run(*argv):
    print("$ captionpsg", " ".join(argv))
    code = main(list(argv))
    print("  exit", code)
    if code != 0:
        raise SystemExit(code)
    return code


def build(root: Path):
    rng = SplitMix64(11)
    for sub in ("feats", "tokens"):
        (root / sub).mkdir()
    for k, img in enumerate(("a", "b", "c")):
        # two regions with opposite features so the grouping has something to find
        grid = 0.1 * rng.normal((8, 8, D))
        grid[:, :4, k] += 1.0
        grid[:, 4:, k] -= 1.0
        write_tensor(grid, root / "feats" / f"{img}.ftns")
    for cid, text in CAPTIONS:
        write_tensor(rng.normal((len(tokenize(text)), TEXT_D)), root / "tokens" / f"{cid}.ftns")
    (root / "caps.jsonl").write_text("".join(json.dumps({"id": c, "caption": t}) + "\n" for c, t in CAPTIONS))
    (root / "objects.json").write_text(json.dumps(["person", "horse", "dog", "couch", "grass", "sky"]))
    (root / "relations.json").write_text(json.dumps(["on", "near", "ride", "under"]))
    (root / "stuff.json").write_text(json.dumps(["grass", "sky"]))


def main_demo():
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        build(root)

        run("parse", "--captions", str(root / "caps.jsonl"), "--out", str(root / "graphs.jsonl"))
        for line in (root / "graphs.jsonl").read_text().splitlines():
            g = json.loads(line)
            print("  ", g["caption_id"], [e["lemma"] for e in g["entities"]], [r["lemma"] for r in g["edges"]])

        run("init-weights", "--dim", str(D), "--text-dim", str(TEXT_D), "--shared-dim", "8",
            "--centers", "16,4", "--objects", str(root / "objects.json"), "--relations", str(root / "relations.json"), "--seed", "1",
            "--out", str(root / "w.json"))

        run("ground", "--feats", str(root / "feats"), "--tokens", str(root / "tokens"),
            "--graphs", str(root / "graphs.jsonl"), "--weights", str(root / "w.json"),
            "--patch-size", "2", "--out", str(root / "ground.json"))
        print("  ", (root / "ground.json").read_text()[:200], "...")

        run("gradcheck", "--seed", "0")

        run("infer", "--feats", str(root / "feats"), "--weights", str(root / "w.json"),
            "--labels", str(root / "objects.json"), str(root / "relations.json"),
            "--patch-size", "2", "--stuff", str(root / "stuff.json"), "--out", str(root / "pred"))
        for p in sorted((root / "pred").iterdir()):
            psg = json.loads(p.read_text())
            print("  ", p.name, [i["label"] for i in psg["instances"]], "relations", len(psg["relations"]))

        # scoring predictions against themselves: N5 keeps all four predicates per pair, N3 drops one
        run("eval", "--pred", str(root / "pred"), "--gt", str(root / "pred"), "--out", str(root / "report.json"))
        run("export", "--psg", str(root / "pred"), "--dot", str(root / "dot"))
        print("  dot files:", sorted(p.name for p in (root / "dot").iterdir()))


if __name__ == "__main__":
    main_demo()
