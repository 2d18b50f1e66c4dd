"""Smoke test for the iospe Python extension.

Builds the extension with cargo (unless IOSPE_LIB points at a built
library), loads it as the `iospe` module and runs a small end-to-end pass.
"""

import importlib.util
import os
import shutil
import subprocess
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load_module(tmp):
    lib = os.environ.get("IOSPE_LIB")
    if not lib:
        subprocess.run(["cargo", "build", "--release", "-p", "iospe-python"], cwd=ROOT, check=True)
        lib = os.path.join(ROOT, "target", "release", "libiospe_py.so")
    dest = os.path.join(tmp, "iospe.so")
    shutil.copy(lib, dest)
    spec = importlib.util.spec_from_file_location("iospe", dest)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def main():
    with tempfile.TemporaryDirectory() as tmp:
        iospe = load_module(tmp)

        assert iospe.tokenize("Fast heating, quiet motor.") == ["fast", "heating", "quiet", "motor"]
        assert len(iospe.split_sentences("One. Two, three.", True)) == 3
        assert abs(iospe.relative_increase(30, 1000, 20, 1000) - 0.5) < 1e-12
        assert iospe.split_stream("user-1") in {"baseline", "experimental", "core", "transition"}
        assert abs(iospe.cosine_similarity([1.0, 0.0], [1.0, 0.0]) - 1.0) < 1e-12

        corpus = iospe.synthetic_corpus(12, 3)
        pipe = iospe.Pipeline(seed=5)
        reports = pipe.train(corpus["products"], corpus["human_selling_points"], corpus["pairs"])
        assert len(reports) == pipe.config["sharpening"]["rounds"]

        pool = pipe.extract_pool(corpus["products"])
        assert pool and all(p["score"] >= pipe.config["fine_threshold"] for p in pool)
        path = os.path.join(tmp, "pool.jsonl")
        iospe.pool_save(pool, path)
        assert iospe.pool_load(path) == pool

        sku = pool[0]["sku_id"]
        picked = pipe.assign(pool, corpus["profiles"], corpus["profiles"][0]["customer_id"], sku)
        assert picked["sku_id"] == sku
        try:
            pipe.assign(pool, corpus["profiles"], "anyone", "no-such-sku")
            raise AssertionError("unknown sku accepted")
        except KeyError:
            pass

        gen = iospe.Generator.train([(p["source"], p["target"]) for p in corpus["pairs"]])
        out = gen.generate("this desk is very easy for me to assemble and install")
        print("generated:", out)

        fine = pipe.fine
        ranked = fine.rank([p["text"] for p in pool], 3)
        assert len(ranked) == 3 and ranked[0][1] >= ranked[-1][1]

        models = os.path.join(tmp, "models")
        pipe.save(models)
        again = iospe.Pipeline(seed=5)
        again.load(models)
        assert again.extract_pool(corpus["products"]) == pool

        print(f"ok: {len(pool)} selling points, {len(reports)} sharpening rounds")


if __name__ == "__main__":
    sys.exit(main())
