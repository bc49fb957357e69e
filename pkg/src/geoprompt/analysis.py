"""Correlation of embedding distances with country statistics, descriptor
topic counting, and embedding export.

The class-embedding distance between two countries is the mean over classes
of the cosine distance (1 - cos) between their knowledge vectors; embeddings
are unit-norm, so cosine and squared Euclidean distances are monotonically
equivalent and cosine is the documented choice. Pearson's rho over all
unordered country pairs relates those distances to absolute differences in a
per-country statistic.

Two-sided p-values come from the exact Student-t tail computed with a
Lentz-style continued fraction for the regularized incomplete beta function
(accurate to ~1e-10), so reported significance is reproducible without any
stats dependency.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from itertools import combinations
from typing import Mapping, Sequence

import numpy as np

from .embedcore import cosine_sim
from .encoder import save_embedding_store
from .errors import (
    ClassSetMismatchError,
    TooFewPointsError,
    UnmappedCountryError,
    ZeroVarianceError,
)
from .knowledge import DescriptorSet

log = logging.getLogger(__name__)


def avg_class_embedding_distance(emb_i: Mapping[str, np.ndarray],
                                 emb_j: Mapping[str, np.ndarray]) -> float:
    """Mean over classes of 1 - cos between two countries' class embeddings."""
    if set(emb_i) != set(emb_j):
        raise ClassSetMismatchError(
            f"class sets differ: {sorted(set(emb_i) ^ set(emb_j))}"
        )
    if not emb_i:
        raise ClassSetMismatchError("empty class embedding tables")
    dists = [1.0 - cosine_sim(emb_i[c], emb_j[c]) for c in sorted(emb_i)]
    return float(np.mean(dists))


def _betacf(a: float, b: float, x: float, max_iter: int = 300,
            eps: float = 1e-14) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise RuntimeError("incomplete beta continued fraction did not converge")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) via the continued fraction, symmetrized for stability."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf(t: float, dof: float) -> float:
    """P(T > t) for Student's t with ``dof`` degrees of freedom."""
    if dof <= 0:
        raise ValueError("degrees of freedom must be positive")
    x = dof / (dof + t * t)
    tail = 0.5 * regularized_incomplete_beta(dof / 2.0, 0.5, x)
    return tail if t >= 0 else 1.0 - tail


@dataclass
class PearsonResult:
    rho: float
    p_value: float
    n: int

    def significant(self, alpha: float = 0.01) -> bool:
        return self.p_value < alpha


def pearson(x: Sequence[float], y: Sequence[float]) -> PearsonResult:
    """Pearson's rho with a two-sided p-value from the exact t reference.

    t = rho * sqrt((n-2) / (1-rho^2)); |rho| = 1 maps to p = 0.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("x and y must have equal length")
    n = x.shape[0]
    if n < 3:
        raise TooFewPointsError(f"need >= 3 points, got {n}")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = float(np.sqrt(np.sum(xc * xc)))
    sy = float(np.sqrt(np.sum(yc * yc)))
    if sx == 0.0 or sy == 0.0:
        raise ZeroVarianceError("pearson undefined for a constant series")
    rho = float(np.clip(float(np.sum(xc * yc)) / (sx * sy), -1.0, 1.0))
    if abs(rho) == 1.0:
        p = 0.0
    else:
        t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
        p = 2.0 * student_t_sf(abs(t), n - 2)
    return PearsonResult(rho=rho, p_value=min(p, 1.0), n=n)


@dataclass
class CorrelationRow:
    statistic: str
    rho: float
    p_value: float
    significant: bool
    n_pairs: int


def pair_distance_series(embeddings: Mapping[str, Mapping[str, np.ndarray]]
                         ) -> tuple[list[tuple[str, str]], list[float]]:
    """All C(n,2) unordered country pairs with their mean embedding distances."""
    countries = sorted(embeddings)
    pairs = list(combinations(countries, 2))
    dists = [avg_class_embedding_distance(embeddings[i], embeddings[j])
             for i, j in pairs]
    return pairs, dists


def stat_correlation(stats: Mapping[str, Mapping[str, float]],
                     embeddings: Mapping[str, Mapping[str, np.ndarray]],
                     statistics: Sequence[str],
                     alpha: float = 0.01) -> list[CorrelationRow]:
    """One correlation row per statistic over every unique country pair.

    A statistic missing for any country is skipped with a warning rather
    than aborting the table.
    """
    countries = sorted(embeddings)
    if len(countries) < 3:
        raise TooFewPointsError("need >= 3 countries for pair correlations")
    pairs, dists = pair_distance_series(embeddings)
    rows: list[CorrelationRow] = []
    for stat in statistics:
        missing = [c for c in countries if c not in stats or stat not in stats[c]]
        if missing:
            log.warning("statistic %r missing for %s; skipped", stat, missing[:5])
            continue
        diffs = [abs(stats[i][stat] - stats[j][stat]) for i, j in pairs]
        try:
            result = pearson(dists, diffs)
        except ZeroVarianceError:
            log.warning("statistic %r: degenerate series (zero variance); skipped",
                        stat)
            continue
        rows.append(CorrelationRow(statistic=stat, rho=result.rho,
                                   p_value=result.p_value,
                                   significant=result.significant(alpha),
                                   n_pairs=len(pairs)))
    return rows


def load_country_stats(path) -> tuple[dict[str, dict[str, float]], list[str]]:
    """CSV with header country,stat1,stat2,...; returns (table, statistic names)."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        stat_names = header[1:]
        table: dict[str, dict[str, float]] = {}
        for row in reader:
            if not row:
                continue
            country = row[0]
            table[country] = {}
            for name, cell in zip(stat_names, row[1:]):
                if cell.strip() != "":
                    table[country][name] = float(cell)
    return table, stat_names


@dataclass
class TopicCount:
    class_name: str
    keyword: str
    continent: str
    count: int
    rel: float


def topic_counts(dset: DescriptorSet, keywords: Mapping[str, Sequence[str]],
                 continent_map: Mapping[str, str]) -> list[TopicCount]:
    """Per-(class, keyword, continent) country counts and relative counts.

    A country counts for a keyword when any of its descriptors for the class
    contains the keyword as a case-insensitive substring (so "thatch" counts
    "thatched roof"). The relative count divides by the number of the
    continent's countries present in the descriptor set.
    """
    countries = dset.countries()
    for country in countries:
        if country not in continent_map:
            raise UnmappedCountryError(f"country {country!r} has no continent")
    by_continent: dict[str, list[str]] = {}
    for country in countries:
        by_continent.setdefault(continent_map[country], []).append(country)
    rows: list[TopicCount] = []
    for class_name in sorted(keywords):
        for keyword in keywords[class_name]:
            needle = keyword.lower()
            for continent in sorted(by_continent):
                members = by_continent[continent]
                count = 0
                for country in members:
                    if not dset.has(class_name, country):
                        continue
                    if any(needle in d.lower()
                           for d in dset.get(class_name, country)):
                        count += 1
                rows.append(TopicCount(class_name=class_name, keyword=keyword,
                                       continent=continent, count=count,
                                       rel=count / len(members)))
    return rows


def write_topic_csv(rows: Sequence[TopicCount], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "keyword", "continent", "count", "rel"])
        for r in rows:
            writer.writerow([r.class_name, r.keyword, r.continent, r.count,
                             f"{r.rel:.2f}"])


def write_correlation_csv(rows_by_strategy: Mapping[str, Sequence[CorrelationRow]],
                          path) -> None:
    """Table-shaped CSV: one row per statistic, one rho column per strategy;
    '*' marks a non-significant correlation."""
    strategies = list(rows_by_strategy)
    stats: list[str] = []
    for rows in rows_by_strategy.values():
        for r in rows:
            if r.statistic not in stats:
                stats.append(r.statistic)
    index = {s: {r.statistic: r for r in rows_by_strategy[s]} for s in strategies}
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["statistic"] + [f"rho_{s}" for s in strategies]
                        + ["n_pairs"])
        for stat in stats:
            cells = []
            n_pairs = ""
            for s in strategies:
                row = index[s].get(stat)
                if row is None:
                    cells.append("")
                else:
                    cells.append(f"{row.rho:.3f}" + ("" if row.significant else "*"))
                    n_pairs = row.n_pairs
            writer.writerow([stat] + cells + [n_pairs])


def export_embeddings(embeddings: Mapping[str, np.ndarray], path) -> None:
    """TSV export (store format) with ids "<class>__<country>__<strategy>"."""
    if not embeddings:
        raise ValueError("nothing to export")
    save_embedding_store(dict(embeddings), path)


def export_id(class_name: str, country: str, strategy: str) -> str:
    return f"{class_name}__{country}__{strategy}"


def load_keywords(path) -> dict[str, list[str]]:
    """JSON object: class name -> list of topic keywords."""
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    return {str(k): [str(x) for x in v] for k, v in data.items()}
