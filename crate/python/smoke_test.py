"""Build the extension, import it, and run the fixture pipeline once.

    python3 python/smoke_test.py [--no-build]
"""

import argparse
import os
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
FIXTURES = ROOT / "crates" / "core" / "fixtures"


def build():
    env = dict(os.environ, PYO3_BUILD_EXTENSION_MODULE="1")
    subprocess.run(["cargo", "build", "--release", "-p", "fever-py"], cwd=ROOT, env=env, check=True)


def load(tmp):
    lib = ROOT / "target" / "release" / "libfever_py.so"
    if not lib.exists():
        sys.exit(f"missing {lib}; run without --no-build")
    shutil.copy(lib, Path(tmp) / "fever_py.so")
    sys.path.insert(0, tmp)
    import fever_py

    return fever_py


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--no-build", action="store_true")
    args = ap.parse_args()
    if not args.no_build:
        build()

    with tempfile.TemporaryDirectory() as tmp:
        fp = load(tmp)

        assert fp.edit_distance("Dresdn", "Dresden") == 1
        corpus = fp.Corpus.ingest(str(FIXTURES / "wiki.jsonl"))
        titles = fp.TitleDictionary(corpus.page_ids())
        assert titles.lookup("Dresdn")[0][0] == "Dresden"

        ids = corpus.page_ids()
        index = fp.TfIdfIndex(ids, [fp.display_title(p) for p in ids])
        hits = index.top_k("Game of Thrones", 3)
        assert hits[0][0] == "Game_of_Thrones", hits
        path = os.path.join(tmp, "titles.idx")
        index.save(path)
        assert fp.TfIdfIndex.load(path).top_k("Game of Thrones", 3) == hits

        pipe = fp.Pipeline(str(FIXTURES / "config.json"), work_dir=os.path.join(tmp, "work"))
        for outcome in pipe.run_all():
            print(f"{outcome['stage']:10} {outcome['summary']}")
        print("smoke test ok")


if __name__ == "__main__":
    main()
