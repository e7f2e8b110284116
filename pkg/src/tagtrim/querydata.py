"""Query records, label derivation, vocabularies, and synthetic data.

A record holds a source query (word-level tokens), the surviving target
subsequence, one tag per source token, and one keep/drop label per source
token (2 = kept, 3 = dropped; 1 is reserved for the special tokens added
by model-side wrapping and never appears in raw data).

The synthetic generator produces tagged queries whose drop labels are a
deterministic function of tag co-occurrence: a token is dropped exactly
when some configured rule ``tag -> trigger`` fires, i.e. another token in
the same query carries the trigger tag. Tag structure therefore carries
the label signal, while a fraction of tokens is drawn from a shared
ambiguous pool so that token identity alone underdetermines the tag.
"""

import json
import os
import tempfile
from bisect import bisect_left
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import DataError

# Special vocabulary entries. Raw records must not contain them; they are
# introduced only by model-side sequence wrapping.
PAD_TOKEN = "[PAD]"
CLS_TOKEN = "[CLS]"
SEP_TOKEN = "[SEP]"
UNK_TOKEN = "[UNK]"
RESERVED_TOKENS = (PAD_TOKEN, CLS_TOKEN, SEP_TOKEN, UNK_TOKEN)

PAD_TAG = "[PAD]"
NONE_TAG = "[NONE]"  # tag assigned to CLS/SEP positions
UNK_TAG = "[UNK]"
RESERVED_TAGS = (PAD_TAG, NONE_TAG, UNK_TAG)

KEEP_LABEL = 2
DROP_LABEL = 3
SPECIAL_LABEL = 1
N_CLASSES = 3

_DATASET_KEYS = ("source", "target", "tags", "labels")


def derive_labels(source, target):
    """Per-token keep/drop labels from greedy leftmost subsequence matching.

    Returns a list with 2 at source positions matched into ``target`` (in
    order, always taking the earliest possible match) and 3 elsewhere.
    Raises ``ValueError`` naming the first unmatched target token if
    ``target`` is not a subsequence of ``source``.
    """
    labels = []
    ti = 0
    for tok in source:
        if ti < len(target) and target[ti] == tok:
            labels.append(KEEP_LABEL)
            ti += 1
        else:
            labels.append(DROP_LABEL)
    if ti != len(target):
        raise ValueError(
            f"target is not a subsequence of source: unmatched token {target[ti]!r}"
        )
    return labels


def one_hot(label, k):
    """Length-``k`` binary vector with a 1 at index ``label - 1``."""
    if not 1 <= label <= k:
        raise ValueError(f"label {label} out of range 1..{k}")
    vec = np.zeros(k, dtype=np.float64)
    vec[label - 1] = 1.0
    return vec


def encode_labels(labels, k=N_CLASSES):
    """Stack one-hot rows for a label sequence, shape (len(labels), k)."""
    out = np.zeros((len(labels), k), dtype=np.float64)
    for i, label in enumerate(labels):
        if not 1 <= label <= k:
            raise ValueError(f"label {label} out of range 1..{k}")
        out[i, label - 1] = 1.0
    return out


@dataclass(frozen=True)
class QueryRecord:
    """One tagged query with its trimmed target and keep/drop labels.

    Immutable and validated on construction: tags and labels align with
    the source, the target is the greedy subsequence the labels describe,
    and no reserved special tokens or tags appear.
    """

    source: tuple
    target: tuple
    tags: tuple
    labels: tuple

    def __post_init__(self):
        object.__setattr__(self, "source", tuple(self.source))
        object.__setattr__(self, "target", tuple(self.target))
        object.__setattr__(self, "tags", tuple(self.tags))
        object.__setattr__(self, "labels", tuple(int(x) for x in self.labels))
        m = len(self.source)
        if m == 0:
            raise ValueError("source must contain at least one token")
        if len(self.tags) != m or len(self.labels) != m:
            raise ValueError(
                f"tags ({len(self.tags)}) and labels ({len(self.labels)}) "
                f"must match source length ({m})"
            )
        if len(self.target) > m:
            raise ValueError("target is longer than source")
        for tok in self.source:
            if not isinstance(tok, str) or not tok:
                raise ValueError(f"source token {tok!r} is not a non-empty string")
            if tok in RESERVED_TOKENS:
                raise ValueError(f"reserved token {tok!r} in raw source")
        for tag in self.tags:
            if not isinstance(tag, str) or not tag:
                raise ValueError(f"tag {tag!r} is not a non-empty string")
            if tag in RESERVED_TAGS:
                raise ValueError(f"reserved tag {tag!r} in raw record")
        bad = set(self.labels) - {KEEP_LABEL, DROP_LABEL}
        if bad:
            raise ValueError(f"raw labels must be 2 or 3, got {sorted(bad)}")
        derived = tuple(derive_labels(self.source, self.target))
        if derived != self.labels:
            raise ValueError(
                f"labels {list(self.labels)} disagree with derived "
                f"{list(derived)} for target {list(self.target)}"
            )

    @property
    def n_tokens(self):
        return len(self.source)


@dataclass(frozen=True)
class Vocab:
    """Bijective token->id and tag->id maps with fixed reserved prefixes.

    Token ids: PAD=0, CLS=1, SEP=2, UNK=3, then corpus tokens in
    lexicographic order. Tag ids: PAD=0, NONE=1, UNK=2, then corpus tags
    lexicographically. Lookups of unseen names map to UNK.
    """

    token_to_id: Mapping[str, int]
    tag_to_id: Mapping[str, int]

    def __post_init__(self):
        for name, mapping, reserved in (
            ("token", self.token_to_id, RESERVED_TOKENS),
            ("tag", self.tag_to_id, RESERVED_TAGS),
        ):
            ids = sorted(mapping.values())
            if ids != list(range(len(mapping))):
                raise ValueError(f"{name} ids are not dense from 0")
            for i, special in enumerate(reserved):
                if mapping.get(special) != i:
                    raise ValueError(f"{name} map must assign {special!r} id {i}")

    @property
    def n_tokens(self):
        return len(self.token_to_id)

    @property
    def n_tags(self):
        return len(self.tag_to_id)

    def token_id(self, token):
        return self.token_to_id.get(token, self.token_to_id[UNK_TOKEN])

    def tag_id(self, tag):
        return self.tag_to_id.get(tag, self.tag_to_id[UNK_TAG])

    def token_list(self):
        """All tokens ordered by id (for serialization)."""
        return [t for t, _ in sorted(self.token_to_id.items(), key=lambda kv: kv[1])]

    def tag_list(self):
        return [t for t, _ in sorted(self.tag_to_id.items(), key=lambda kv: kv[1])]

    @classmethod
    def from_lists(cls, tokens, tags):
        return cls(
            token_to_id={t: i for i, t in enumerate(tokens)},
            tag_to_id={t: i for i, t in enumerate(tags)},
        )


def build_vocab(records):
    """Vocabulary over every token and tag in ``records``, reproducibly.

    Ids are reserved entries first, then names in lexicographic order, so
    two builds from the same records are identical.
    """
    if not records:
        raise ValueError("cannot build a vocabulary from an empty record list")
    tokens = sorted({tok for r in records for tok in r.source})
    tags = sorted({tag for r in records for tag in r.tags})
    return Vocab.from_lists(
        list(RESERVED_TOKENS) + tokens, list(RESERVED_TAGS) + tags
    )


@dataclass(frozen=True)
class DropRule:
    """Drop any token tagged ``tag`` when another token carries ``trigger``."""

    tag: str
    trigger: str


def _default_length_dist():
    # Calibrated so four-word queries are ~28% of the corpus and three-to-
    # five-word queries are ~70%; single-word queries never occur and
    # two-word queries are rare.
    return {2: 0.05, 3: 0.24, 4: 0.28, 5: 0.18, 6: 0.13, 7: 0.08, 8: 0.04}


def _default_categories():
    # Weighted tag inventories per listing category. Each category hosts
    # exactly one drop-rule pair, and those two tags carry extra weight
    # while the long tail of filler tags stays light, so rule pairs are
    # far more frequent than any chance pairing and a support threshold
    # can recover them.
    def inventory(rule_tag, trigger_tag, fillers):
        inv = {rule_tag: 0.12, trigger_tag: 0.12}
        inv.update({name: 0.076 for name in fillers})
        return inv

    return {
        "motor": inventory("year", "model", [
            "part", "era", "finish", "trim", "origin", "wheel", "engine",
            "paint", "usage", "grade",
        ]),
        "fashion": inventory("gender", "brand", [
            "size", "color", "fabric", "style", "season", "fit", "cut",
            "pattern", "occasion", "heel",
        ]),
        "electronics": inventory("condition", "brand", [
            "storage", "screen", "battery", "port", "chip", "warranty",
            "band", "res", "power", "carrier",
        ]),
        "media": inventory("feature", "type", [
            "region", "format", "lang", "genre", "edition", "platform",
            "disc", "rating", "studio", "remaster",
        ]),
    }


def _default_rules():
    return (
        DropRule("year", "model"),
        DropRule("condition", "brand"),
        DropRule("gender", "brand"),
        DropRule("feature", "type"),
    )


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the synthetic tagged-query generator.

    ``categories`` maps category name to a tag->weight inventory;
    ``rules`` are the global tag-pair drop rules; ``length_dist`` maps
    word count to probability (must sum to 1, minimum length 2);
    ``ambiguous_frac`` of tokens are drawn from a pool shared across all
    tags instead of the tag's private vocabulary (``tag_ambiguity``
    overrides that rate for individual tags, which controls how much of
    the label signal is invisible to a model that sees only token
    surfaces); ``pair_boost`` is the probability of force-seeding a
    rule's tag pair into a query so rule pairs stay frequent. Seeded
    pairs prefer non-adjacent positions so their co-occurrence is
    observable beyond immediate sequence neighbors.
    """

    n_records: int
    seed: int
    categories: Mapping[str, Mapping[str, float]] = field(
        default_factory=_default_categories
    )
    rules: tuple = field(default_factory=_default_rules)
    length_dist: Mapping[int, float] = field(default_factory=_default_length_dist)
    tokens_per_tag: int = 48
    ambiguous_pool_size: int = 120
    ambiguous_frac: float = 0.30
    tag_ambiguity: Mapping[str, float] = field(default_factory=dict)
    pair_boost: float = 0.40

    def __post_init__(self):
        if self.n_records < 1:
            raise ValueError("n_records must be positive")
        if not self.categories:
            raise ValueError("at least one category is required")
        for cat, inventory in self.categories.items():
            if not inventory:
                raise ValueError(f"category {cat!r} has an empty tag inventory")
            for tag, w in inventory.items():
                if w <= 0:
                    raise ValueError(f"tag weight for {cat}/{tag} must be positive")
        if not self.length_dist:
            raise ValueError("length_dist is empty")
        total = float(sum(self.length_dist.values()))
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"length_dist sums to {total}, expected 1")
        for length, p in self.length_dist.items():
            if int(length) < 2:
                raise ValueError("single-word queries are not allowed")
            if p < 0:
                raise ValueError("length probabilities must be nonnegative")
        known_tags = {t for inv in self.categories.values() for t in inv}
        for rule in self.rules:
            for name in (rule.tag, rule.trigger):
                if name not in known_tags:
                    raise ValueError(f"drop rule references unknown tag {name!r}")
        if self.tokens_per_tag < max(int(k) for k in self.length_dist):
            raise ValueError(
                "tokens_per_tag must be at least the maximum query length "
                "so same-tag tokens within a query can stay distinct"
            )
        if not 0.0 <= self.ambiguous_frac <= 1.0:
            raise ValueError("ambiguous_frac must be in [0, 1]")
        for tag, rate in self.tag_ambiguity.items():
            if tag not in known_tags:
                raise ValueError(f"tag_ambiguity references unknown tag {tag!r}")
            if not 0.0 <= float(rate) <= 1.0:
                raise ValueError(f"tag_ambiguity[{tag!r}] must be in [0, 1]")
        any_ambiguity = self.ambiguous_frac > 0 or any(
            float(r) > 0 for r in self.tag_ambiguity.values()
        )
        if any_ambiguity and self.ambiguous_pool_size < max(
            int(k) for k in self.length_dist
        ):
            raise ValueError("ambiguous_pool_size too small for distinct tokens")
        if not 0.0 <= self.pair_boost <= 1.0:
            raise ValueError("pair_boost must be in [0, 1]")


def _default_tag_ambiguity():
    # Tags on the dropped side of a rule are written ambiguously most of
    # the time (an opaque alphanumeric rarely reveals that it is a year
    # or a condition grade), while trigger tags are usually written with
    # recognizable private tokens. This split is what makes tag structure
    # worth modelling: whether an opaque token should be dropped depends
    # on which other tags appear in the query, not on its own surface.
    rates = {tag: 0.85 for tag in ("year", "condition", "gender", "feature")}
    rates.update({tag: 0.15 for tag in ("model", "brand", "type")})
    return rates


def default_synth_config(n_records=33334, seed=7):
    """The stock desk-scale corpus configuration (6:2:2 splits downstream)."""
    return SynthConfig(
        n_records=n_records,
        seed=seed,
        ambiguous_frac=0.35,
        tag_ambiguity=_default_tag_ambiguity(),
        pair_boost=0.45,
    )


def rule_labels(tags, rules):
    """Labels each rule set implies for a tag sequence: 3 where a rule fires.

    A rule ``tag -> trigger`` fires at position i when tags[i] == tag and
    some other position j != i carries the trigger.
    """
    counts = Counter(tags)
    by_tag = {}
    for rule in rules:
        by_tag.setdefault(rule.tag, []).append(rule.trigger)
    labels = []
    for tag in tags:
        dropped = False
        for trigger in by_tag.get(tag, ()):
            present = counts[trigger] - (1 if trigger == tag else 0)
            if present > 0:
                dropped = True
                break
        labels.append(DROP_LABEL if dropped else KEEP_LABEL)
    return labels


_MAX_RECORD_RETRIES = 25
_MAX_TOKEN_RETRIES = 200


class _CategorySampler:
    """Precomputed cumulative distributions for one category."""

    def __init__(self, inventory, rules):
        self.tags = sorted(inventory)
        weights = np.array([float(inventory[t]) for t in self.tags])
        self.tag_cdf = list(np.cumsum(weights / weights.sum()))
        tag_set = set(self.tags)
        self.rules = [
            r for r in rules if r.tag in tag_set and r.trigger in tag_set
        ]


def generate_synthetic(cfg):
    """Deterministically generate ``cfg.n_records`` rule-labelled records.

    Token strings are distinct within each record (so greedy label
    derivation reproduces the rule labels exactly), and a record whose
    rules would drop every token is resampled; if that keeps failing the
    config is reported as unsatisfiable.
    """
    rng = np.random.default_rng(cfg.seed)
    cat_names = sorted(cfg.categories)
    samplers = [_CategorySampler(cfg.categories[c], cfg.rules) for c in cat_names]
    lengths = sorted(int(k) for k in cfg.length_dist)
    length_cdf = list(
        np.cumsum([float(cfg.length_dist[k]) for k in lengths])
        / sum(float(v) for v in cfg.length_dist.values())
    )

    def draw(cdf, items):
        # min() guards the (rounding-only) case of u above the last edge
        return items[min(bisect_left(cdf, rng.random()), len(items) - 1)]

    def draw_token(tag, used):
        ambiguity = float(cfg.tag_ambiguity.get(tag, cfg.ambiguous_frac))
        for _ in range(_MAX_TOKEN_RETRIES):
            if ambiguity > 0 and rng.random() < ambiguity:
                tok = f"xx{int(rng.integers(cfg.ambiguous_pool_size))}"
            else:
                tok = f"{tag}{int(rng.integers(cfg.tokens_per_tag))}"
            if tok not in used:
                used.add(tok)
                return tok
        raise DataError(
            "unsatisfiable config: token pools too small to keep tokens "
            "distinct within a query"
        )

    records = []
    for _ in range(cfg.n_records):
        for _attempt in range(_MAX_RECORD_RETRIES):
            sampler = samplers[int(rng.integers(len(cat_names)))]
            m = draw(length_cdf, lengths)
            tags = [draw(sampler.tag_cdf, sampler.tags) for _ in range(m)]
            if sampler.rules and m >= 2 and rng.random() < cfg.pair_boost:
                rule = sampler.rules[int(rng.integers(len(sampler.rules)))]
                # Prefer non-adjacent slots so the pair's co-occurrence is
                # visible beyond immediate sequence neighbors; two-word
                # queries have no such slots and fall back to adjacency.
                apart = [
                    (a, b)
                    for a in range(m)
                    for b in range(m)
                    if a != b and (m == 2 or abs(a - b) >= 2)
                ]
                i, j = apart[int(rng.integers(len(apart)))]
                tags[i] = rule.tag
                tags[j] = rule.trigger
            labels = rule_labels(tags, cfg.rules)
            if KEEP_LABEL not in labels:
                continue  # every token dropped; resample the record
            used = set()
            source = [draw_token(tag, used) for tag in tags]
            target = [s for s, l in zip(source, labels) if l == KEEP_LABEL]
            records.append(
                QueryRecord(tuple(source), tuple(target), tuple(tags), tuple(labels))
            )
            break
        else:
            raise DataError(
                "unsatisfiable config: the drop rules eliminated every token "
                f"in {_MAX_RECORD_RETRIES} consecutive samples"
            )
    return records


def write_dataset(records, path):
    """Write records as JSON lines, atomically (via a same-directory temp file).

    Each line is a flat object with exactly the keys "source", "target",
    "tags", "labels", in that order.
    """
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp_path = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            for rec in records:
                line = json.dumps(
                    {
                        "source": list(rec.source),
                        "target": list(rec.target),
                        "tags": list(rec.tags),
                        "labels": list(rec.labels),
                    },
                    ensure_ascii=False,
                    separators=(",", ":"),
                )
                fh.write(line + "\n")
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def read_dataset(path):
    """Parse a JSON-lines dataset, reporting problems with line numbers."""
    records = []
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                raise DataError(f"{path}:{lineno}: blank line in dataset")
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise DataError(f"{path}:{lineno}: line is not a JSON object")
            missing = [k for k in _DATASET_KEYS if k not in obj]
            if missing:
                raise DataError(f"{path}:{lineno}: missing field {missing[0]!r}")
            extra = [k for k in obj if k not in _DATASET_KEYS]
            if extra:
                raise DataError(f"{path}:{lineno}: unexpected field {extra[0]!r}")
            for key in ("source", "target", "tags"):
                val = obj[key]
                if not isinstance(val, list) or not all(
                    isinstance(x, str) for x in val
                ):
                    raise DataError(
                        f"{path}:{lineno}: {key!r} must be an array of strings"
                    )
            if not isinstance(obj["labels"], list) or not all(
                isinstance(x, int) and not isinstance(x, bool)
                for x in obj["labels"]
            ):
                raise DataError(
                    f"{path}:{lineno}: 'labels' must be an array of integers"
                )
            try:
                records.append(
                    QueryRecord(
                        tuple(obj["source"]),
                        tuple(obj["target"]),
                        tuple(obj["tags"]),
                        tuple(obj["labels"]),
                    )
                )
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return records


def split_records(records, seed):
    """Shuffle and split 6:2:2 into (train, test, validation).

    Splits are disjoint by record identity and deterministic for a fixed
    seed; train gets int(0.6 n), test int(0.2 n), validation the rest.
    """
    n = len(records)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(0.6 * n)
    n_test = int(0.2 * n)
    train = [records[i] for i in order[:n_train]]
    test = [records[i] for i in order[n_train:n_train + n_test]]
    val = [records[i] for i in order[n_train + n_test:]]
    return train, test, val
