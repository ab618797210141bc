#!/usr/bin/env python3
"""Rebuild the benchmark CSV files in this directory from locally available copies.

Sources (all offline copies of the UCI data):
  pima.csv            MASS::Pima.tr + MASS::Pima.te (the 532 complete cases), via the
                      `pydataset` package resources.
  wbc_original.csv    MASS::biopsy (UCI breast-cancer-wisconsin, 699 rows, missing
                      bare-nuclei cells left empty), via `pydataset`.
  wbc_diagnostic.csv  scikit-learn's bundled copy of UCI WDBC.
  ionosphere.csv      UCI ionosphere (all 34 attributes), from the Orange3 test data.
  german.csv          UCI Statlog German credit (categorical form, from `keel-ds`),
                      numerically encoded by `encode_german` below.

Usage: prepare_data.py PYDATASET_RESOURCES_DIR IONOSPHERE_TAB GERMAN_DAT
"""
import csv
import os
import sys


def write(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def read_rcsv(path):
    with open(path) as f:
        r = csv.reader(f)
        header = next(r)
        return header, list(r)


def pima(res, out):
    rows = []
    for part in ("Pima.tr.csv", "Pima.te.csv"):
        header, body = read_rcsv(os.path.join(res, "rdata/csv/MASS", part))
        for r in body:
            rows.append(r[1:8] + ["1" if r[8] == "Yes" else "0"])
    write(out, header[1:8] + ["diabetic"], rows)


def wbc_original(res, out):
    _, body = read_rcsv(os.path.join(res, "rdata/csv/MASS/biopsy.csv"))
    names = ["clump_thickness", "uniformity_cell_size", "uniformity_cell_shape",
             "marginal_adhesion", "single_epithelial_cell_size", "bare_nuclei",
             "bland_chromatin", "normal_nucleoli", "mitoses"]
    rows = []
    for r in body:
        feats = ["" if v == "NA" else v for v in r[2:11]]
        rows.append(feats + ["1" if r[11] == "malignant" else "0"])
    write(out, names + ["malignant"], rows)


def wbc_diagnostic(out):
    from sklearn.datasets import load_breast_cancer
    b = load_breast_cancer()
    names = [n.replace(" ", "_") for n in b.feature_names]
    rows = [[repr(float(v)) for v in x] + [str(1 - int(t))] for x, t in zip(b.data, b.target)]
    write(out, names + ["malignant"], rows)


def ionosphere(tab, out):
    with open(tab) as f:
        lines = [l.rstrip("\n").split("\t") for l in f]
    header = lines[0][:34]
    rows = [r[:34] + ["1" if r[34] == "g" else "0"] for r in lines[3:] if r and r[0]]
    write(out, header + ["good"], rows)


# Ordered categories become integer codes; nominal ones get indicator columns.
def encode_german(r):
    code = lambda v, prefix: int(v.strip()[len(prefix):])
    status = code(r[0], "A1")            # A11..A14 -> 1..4
    history = code(r[2], "A3")           # A30..A34 -> 0..4
    purpose = r[3].strip()
    savings = code(r[5], "A6")           # A61..A65 -> 1..5
    employment = code(r[6], "A7")        # A71..A75 -> 1..5
    personal = code(r[8], "A9")          # A91..A95 -> 1..5
    debtors = code(r[9], "A10")          # A101..A103 -> 1..3
    prop = code(r[11], "A12")            # A121..A124 -> 1..4
    plans = code(r[13], "A14")           # A141..A143 -> 1..3
    housing = code(r[14], "A15")         # A151..A153 -> 1..3
    job = code(r[16], "A17")             # A171..A174 -> 1..4
    phone = code(r[18], "A19") - 1       # A191/A192 -> 0/1
    foreign = code(r[19], "A20") - 1     # A201/A202 -> 0/1
    num = lambda i: r[i].strip()
    return [
        status, num(1), history, num(4), savings, employment, num(7), personal,
        debtors, num(10), prop, num(12), plans, housing, num(15), job, num(17),
        phone, foreign,
        int(purpose == "A40"), int(purpose == "A41"), int(purpose in ("A42", "A44", "A45")),
        int(purpose == "A43"), int(purpose in ("A46", "A48")),
    ]


def german(dat, out):
    names = ["status", "duration", "credit_history", "amount", "savings", "employment",
             "installment_rate", "personal_status", "other_debtors", "residence",
             "property", "age", "other_plans", "housing", "existing_credits", "job",
             "dependents", "telephone", "foreign_worker", "purpose_new_car",
             "purpose_used_car", "purpose_household", "purpose_radio_tv", "purpose_education"]
    rows = []
    with open(dat) as f:
        for line in f:
            if line.startswith("@") or not line.strip():
                continue
            r = line.strip().split(",")
            rows.append([str(v) for v in encode_german(r)] + ["1" if r[20].strip() == "2" else "0"])
    write(out, names + ["bad_credit"], rows)


def main():
    res, tab, dat = sys.argv[1:4]
    here = os.path.dirname(os.path.abspath(__file__))
    pima(res, os.path.join(here, "pima.csv"))
    wbc_original(res, os.path.join(here, "wbc_original.csv"))
    wbc_diagnostic(os.path.join(here, "wbc_diagnostic.csv"))
    ionosphere(tab, os.path.join(here, "ionosphere.csv"))
    german(dat, os.path.join(here, "german.csv"))


if __name__ == "__main__":
    main()
