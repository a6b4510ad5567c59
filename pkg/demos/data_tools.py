"""
Stores, frequency strata, text cleaning and the command line
============================================================

The embedding store round-trips through csv, jsonl and a binary format.
Class strata pick popular or semi-rare labels, and the cleaner prepares
free text before it is embedded elsewhere.
"""
import subprocess
import sys
import tempfile
from pathlib import Path

from metadro.dataset import StratumSpec, cap_per_class, clean_text, load_store, select_classes, write_store
from metadro.synth import SynthSpec, generate

store = generate(SynthSpec(dim=3, classes=6, records_per_class=30, seed=1))
work = Path(tempfile.mkdtemp())
for suffix in ("csv", "jsonl", "bin"):
    path = work / f"store.{suffix}"
    write_store(store, path)
    back = load_store(path)
    print(suffix, path.stat().st_size, "bytes, round trip equal:", (back.vectors == store.vectors).all())

# strata work on plain label counts too
counts = {"flu": 120, "asthma": 80, "gout": 15, "lupus": 12, "rare_x": 4}
print("popular  ", select_classes(counts, StratumSpec("popular", top_count=2)))
print("semi-rare", select_classes(counts, StratumSpec("semi_rare", top_count=2, min_notes=10)))

small = cap_per_class(store, cap=10, seed=0)
print("capped class counts", small.class_counts())

print(repr(clean_text("Pt. c/o CHEST pain; BP 140/90 -- see   note_2", {"see", "c", "o"})))

# the same steps from the shell
config = work / "run.toml"
config.write_text("dim = 6\nclasses = 12\nrecords_per_class = 20\nn_way = 3\nk_shot = 2\nq_query = 2\n"
                  "iterations = 20\neval_interval = 10\neval_tasks = 10\nhidden = [8]\nembed_dim = 4\n"
                  "split_fractions = [0.5, 0.25, 0.25]\n")
cli = [sys.executable, "-m", "metadro"]
for argv in (["gen-synth", "--config", config, "--out", work / "s.bin"],
             ["inspect", "--store", work / "s.bin"],
             ["train", "--config", config, "--store", work / "s.bin", "--out", work / "ck.bin"],
             ["eval", "--config", config, "--store", work / "s.bin", "--checkpoint", work / "ck.bin"]):
    print("$ metadro", " ".join(str(a) for a in argv[:1]))
    print(subprocess.run(cli + [str(a) for a in argv], capture_output=True, text=True, check=True).stdout)
