"""
Converting Ninapro DB2 to FSE1 recordings
=========================================

Reads the DB2 MATLAB files (one ``S<n>_E<e>_A1.mat`` per subject and
exercise) and writes one FSE1 file per (subject, gesture, repetition)
under ``OUT/subject_XX/``. The result feeds ``fshgr train --data OUT``.

    python demos/convert_db2.py /data/ninapro/db2 /data/db2_fse

Only ``emg``, ``restimulus`` and ``rerepetition`` are read. Rest samples
(stimulus 0) carry no repetition number in DB2 and are skipped. Gestures
are numbered 1..49 across exercises B, C and D; files that number each
exercise from 1 are shifted onto that global range.
"""

import argparse
import re
from pathlib import Path

import numpy as np
from scipy.io import loadmat

from fshgr.data import Recording, RecordKey, exercise_for_gesture, recording_path, write_recording

FS = 2000.0
# first global gesture id of each DB2 exercise file, minus one
OFFSETS = {1: 0, 2: 17, 3: 40}
NAME = re.compile(r"S(\d+)_E(\d)_A1\.mat$", re.IGNORECASE)


def convert_file(path: Path, out: Path) -> int:
    subject, exercise = (int(v) for v in NAME.search(path.name).groups())
    mat = loadmat(path, variable_names=["emg", "restimulus", "rerepetition"])
    emg = np.asarray(mat["emg"], dtype=np.float32)
    stim = np.asarray(mat["restimulus"]).ravel().astype(int)
    reps = np.asarray(mat["rerepetition"]).ravel().astype(int)
    labels = np.unique(stim[stim > 0])
    offset = OFFSETS[exercise] if labels.size and labels.min() <= OFFSETS[exercise] else 0
    written = 0
    for g in labels:
        for r in np.unique(reps[(stim == g) & (reps > 0)]):
            mask = (stim == g) & (reps == r)
            gesture = int(g) + offset
            rec = Recording(subject, gesture, int(r), exercise_for_gesture(gesture), FS, emg[mask])
            write_recording(recording_path(out, RecordKey(subject, gesture, int(r))), rec)
            written += 1
    return written


def main():
    parser = argparse.ArgumentParser(description="Convert Ninapro DB2 .mat files to FSE1 recordings.")
    parser.add_argument("db2_root", type=Path, help="directory searched recursively for S<n>_E<e>_A1.mat")
    parser.add_argument("out", type=Path)
    args = parser.parse_args()
    files = sorted(p for p in args.db2_root.rglob("*.mat") if NAME.search(p.name))
    if not files:
        parser.error(f"no S<n>_E<e>_A1.mat files under {args.db2_root}")
    total = 0
    for path in files:
        n = convert_file(path, args.out)
        total += n
        print(f"{path.name}: {n} recordings")
    print(f"wrote {total} recordings under {args.out}")


if __name__ == "__main__":
    main()
