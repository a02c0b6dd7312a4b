"""Synthetic drug/cell/gene data with planted block structure.

Genes belong to latent blocks. A cell's expression of a gene follows the cell's
factor for that gene's block; each drug targets one block (its known DTIs and
fingerprint prototype come from that block) and its potency on a cell rises with
the cell's factor for the drug's block.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import DatasetBundle, DtiMatrix, ExpressionMatrix, FingerprintMatrix, ResponseMatrix
from .smiles import FP_BITS
from .tables import write_labeled_matrix, write_rows

NOISE_LEVELS = {"none": 0.0, "low": 0.15, "medium": 0.4, "high": 0.8}


@dataclass
class Fixture:
    bundle: DatasetBundle
    affinity: np.ndarray  # n x m planted drug-cell affinity
    drug_block: np.ndarray
    gene_block: np.ndarray
    cell_factors: np.ndarray
    noise: float

    def write(self, outdir: str | Path) -> dict[str, Path]:
        """Write the raw matrices in the loader formats; returns the file paths."""
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        b = self.bundle
        paths = {"response": outdir / "response.csv", "expression": outdir / "expression.csv",
                 "dti": outdir / "dti.tsv", "fingerprints": outdir / "fingerprints.csv",
                 "moa": outdir / "drug_moa.tsv"}
        values = np.where(b.response.observed, b.response.values, np.nan)
        write_labeled_matrix(paths["response"], b.response.drugs, b.response.cells, values, "drug")
        write_labeled_matrix(paths["expression"], b.expression.cells, b.expression.genes,
                             b.expression.values, "cell")
        rows = [(b.dti.drugs[i], b.dti.genes[j]) for i, j in zip(*np.nonzero(b.dti.known))]
        write_rows(paths["dti"], ["drug", "gene"], rows)
        with open(paths["fingerprints"], "w") as fh:
            fh.write(",".join(["drug_id"] + [f"bit_{k}" for k in range(b.fingerprints.bits.shape[1])]) + "\n")
            for d, row in zip(b.fingerprints.drugs, b.fingerprints.bits):
                fh.write(d + "," + ",".join(str(int(v)) for v in row) + "\n")
        write_rows(paths["moa"], ["drug", "moa"],
                   [(d, f"block{k}") for d, k in zip(b.response.drugs, self.drug_block)])
        return paths


def make_synthetic_fixture(n: int = 40, m: int = 30, l: int = 60, seed: int = 0,
                           noise: float | str = "low", blocks: int = 4, dti_per_drug: int = 3,
                           observed_fraction: float = 0.9) -> Fixture:
    if min(n, m, l) < 4:
        raise ValueError("fixture needs n, m, l >= 4")
    sigma = NOISE_LEVELS[noise] if isinstance(noise, str) else float(noise)
    rng = np.random.default_rng(seed)
    K = min(blocks, n, l)
    gene_block = rng.permutation(np.arange(l) % K)
    drug_block = rng.permutation(np.arange(n) % K)
    cell_factors = rng.normal(size=(m, K))

    expression = 2.0 * cell_factors[:, gene_block] + rng.normal(0.0, 0.5, size=(m, l)) \
        + rng.uniform(2.0, 8.0, size=l)

    known = np.zeros((n, l), dtype=bool)
    for d in range(n):
        members = np.flatnonzero(gene_block == drug_block[d])
        take = rng.choice(members, size=min(dti_per_drug, len(members)), replace=False)
        known[d, take] = True

    prototypes = rng.random((K, FP_BITS)) < 0.05
    flips = rng.random((n, FP_BITS)) < 0.01
    bits = (prototypes[drug_block] ^ flips).astype(np.float64)

    affinity = cell_factors[:, drug_block].T  # n x m
    potency = rng.uniform(4.0, 8.0, size=n)
    pic50 = potency[:, None] + affinity + sigma * rng.normal(size=(n, m))
    ic50 = 10.0 ** (-pic50)
    observed = rng.random((n, m)) < observed_fraction
    ic50 = np.where(observed, ic50, np.nan)

    drugs = [f"D{i:03d}" for i in range(n)]
    cells = [f"C{j:03d}" for j in range(m)]
    genes = [f"G{k:03d}" for k in range(l)]
    bundle = DatasetBundle(ResponseMatrix(drugs, cells, ic50, observed),
                           ExpressionMatrix(cells, genes, expression),
                           DtiMatrix(drugs, genes, known),
                           FingerprintMatrix(drugs, bits))
    return Fixture(bundle, affinity, drug_block, gene_block, cell_factors, sigma)
