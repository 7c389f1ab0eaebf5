#!/usr/bin/env python3
"""
Island-model program database.

Holds every accepted candidate, partitioned over K islands arranged in a
ring, plus a capacity-bounded elite archive. The database owns the seeded
random source used for parent sampling so that a checkpoint captures
everything needed to continue a run bit-for-bit.
"""

import json
import logging
import math
import os
import random
import tempfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import jsonschema

from eval_cascade import EvaluationReport

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "hotpath-evolve-checkpoint"
CHECKPOINT_VERSION = 1
DEFAULT_ARCHIVE_CAPACITY = 20

POOL_ARCHIVE = "archive"
POOL_ISLAND = "island"
POOL_ALL = "all"
POOL_ORDER = (POOL_ARCHIVE, POOL_ISLAND, POOL_ALL)

CHECKPOINT_SCHEMA = {
    "type": "object",
    "required": ["format", "version", "database"],
    "properties": {
        "format": {"const": CHECKPOINT_FORMAT},
        "version": {"type": "integer"},
        "database": {
            "type": "object",
            "required": ["island_config", "archive_capacity", "candidates", "islands", "archive",
                         "next_id", "sequence", "rng_state"],
        },
        "engine": {"type": ["object", "null"]},
    },
}


class DatabaseError(Exception):
    """Raised on invalid inserts or queries against an empty database."""
    pass


class CheckpointError(Exception):
    """Raised when a checkpoint cannot be written or restored."""
    pass


@dataclass(frozen=True)
class IslandConfig:
    island_count: int = 5
    migration_interval: int = 50
    migration_fraction: float = 0.10
    p_elite: float = 0.7
    p_island: float = 0.2

    def __post_init__(self):
        if self.island_count < 1:
            raise DatabaseError("island_count must be >= 1")
        if self.migration_interval < 1:
            raise DatabaseError("migration_interval must be >= 1")
        if not 0.0 < self.migration_fraction <= 1.0:
            raise DatabaseError(f"migration_fraction {self.migration_fraction} outside (0, 1]")
        if self.p_elite < 0 or self.p_island < 0 or self.p_elite + self.p_island > 1.0 + 1e-12:
            raise DatabaseError(
                f"sampling probabilities must be non-negative with p_elite + p_island <= 1, "
                f"got {self.p_elite} + {self.p_island}"
            )


@dataclass
class Candidate:
    """One program variant with its lineage and evaluation."""
    source: str
    id: Optional[int] = None
    parent_id: Optional[int] = None
    island: Optional[int] = None
    generation: int = 0
    report: Optional[EvaluationReport] = None
    valid: bool = False
    change_summary: str = ""
    migrated_from: Optional[int] = None
    repaired_from: Optional[str] = None
    repair_strategy: Optional[str] = None

    def __post_init__(self):
        if self.valid and (self.report is None or not self.report.passed_all_gates):
            raise DatabaseError("a valid candidate needs a report that passed all gates")
        if self.generation < 0:
            raise DatabaseError("generation must be non-negative")

    @property
    def fitness(self) -> float:
        return self.report.combined_score if self.report is not None else 0.0

    @property
    def is_original(self) -> bool:
        return self.migrated_from is None

    def sort_key(self) -> Tuple[float, int, int]:
        return (-self.fitness, self.generation, self.id if self.id is not None else -1)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["report"] = self.report.to_dict(include_timing=False) if self.report is not None else None
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "Candidate":
        data = dict(data)
        if data.get("report") is not None:
            data["report"] = EvaluationReport.from_dict(data["report"])
        return cls(**data)


@dataclass
class MigrationRecord:
    generation: int
    moves: List[Tuple[int, int, int, int]] = field(default_factory=list)

    def __bool__(self) -> bool:
        return bool(self.moves)

    def to_dict(self) -> dict:
        return {
            "generation": self.generation,
            "moves": [
                {"from_island": s, "to_island": d, "source_id": src, "copy_id": new}
                for (s, d, src, new) in self.moves
            ],
        }


def assign_island(sequence_number: int, config: IslandConfig) -> int:
    """Round-robin island allocation."""
    if sequence_number < 0:
        raise DatabaseError("sequence number must be non-negative")
    return sequence_number % config.island_count


def lineage_root(candidate: Candidate) -> int:
    return candidate.migrated_from if candidate.migrated_from is not None else candidate.id


class ProgramDatabase:
    """
    Serialized owner of the population.

    All mutations go through this object; callers needing a stable view should
    take `candidates()` (a copy of the list) before handing it elsewhere.
    """

    def __init__(self, config: Optional[IslandConfig] = None, seed: int = 0,
                 archive_capacity: int = DEFAULT_ARCHIVE_CAPACITY):
        if archive_capacity < 1:
            raise DatabaseError("archive capacity must be >= 1")
        self.config = config or IslandConfig()
        self.archive_capacity = archive_capacity
        self.rng = random.Random(seed)
        self._candidates: Dict[int, Candidate] = {}
        self._islands: List[List[int]] = [[] for _ in range(self.config.island_count)]
        self._archive: List[int] = []
        self._next_id = 0
        self._sequence = 0

    def __len__(self) -> int:
        return len(self._candidates)

    def insert(self, candidate: Candidate, allow_invalid: bool = False) -> Candidate:
        """
        Store a candidate and update the archive.

        The database assigns the id and, when the candidate has none, the island
        (round-robin over insert order).

        Args:
            candidate: Candidate to store
            allow_invalid: Accept candidates that failed evaluation (only the
                unfiltered ablation mode uses this)

        Returns:
            The stored candidate, with id and island filled in

        Raises:
            DatabaseError: On an invalid candidate or out-of-range island
        """
        if not candidate.valid and not allow_invalid:
            raise DatabaseError(f"rejected invalid candidate (parent {candidate.parent_id}); only valid programs are stored")

        island = candidate.island
        if island is None:
            island = assign_island(self._sequence, self.config)
        if not 0 <= island < self.config.island_count:
            raise DatabaseError(f"island {island} outside [0, {self.config.island_count})")

        stored = replace(candidate, id=self._next_id, island=island)
        self._next_id += 1
        self._sequence += 1
        self._store(stored)
        logger.debug(f"Inserted candidate {stored.id} on island {island} (fitness {stored.fitness:.4f})")
        return stored

    def _store(self, candidate: Candidate):
        self._candidates[candidate.id] = candidate
        self._islands[candidate.island].append(candidate.id)
        if candidate.is_original:
            self._update_archive(candidate)

    def _update_archive(self, candidate: Candidate):
        if len(self._archive) >= self.archive_capacity:
            worst = self._candidates[self._archive[-1]]
            if candidate.sort_key() >= worst.sort_key():
                return
        self._archive.append(candidate.id)
        self._archive.sort(key=lambda cid: self._candidates[cid].sort_key())
        del self._archive[self.archive_capacity:]

    def get(self, candidate_id: int) -> Candidate:
        try:
            return self._candidates[candidate_id]
        except KeyError:
            raise DatabaseError(f"unknown candidate id {candidate_id}")

    def candidates(self) -> List[Candidate]:
        return [self._candidates[cid] for cid in sorted(self._candidates)]

    def originals(self) -> List[Candidate]:
        return [c for c in self.candidates() if c.is_original]

    def island_members(self, island: int) -> List[Candidate]:
        return [self._candidates[cid] for cid in self._islands[island]]

    def archive(self) -> List[Candidate]:
        return [self._candidates[cid] for cid in self._archive]

    def best(self) -> Candidate:
        if not self._candidates:
            raise DatabaseError("database is empty")
        return min(self._candidates.values(), key=lambda c: c.sort_key())

    def sample_parent_with_pool(self, current_island: int, rng: Optional[random.Random] = None,
                                config: Optional[IslandConfig] = None) -> Tuple[Candidate, str]:
        """Three-pool parent sampling; returns the candidate and the pool it came from."""
        if not self._candidates:
            raise DatabaseError("cannot sample a parent from an empty database")
        rng = rng or self.rng
        config = config or self.config

        draw = rng.random()
        if draw < config.p_elite:
            first = 0
        elif draw < config.p_elite + config.p_island:
            first = 1
        else:
            first = 2

        pools = {
            POOL_ARCHIVE: self._archive,
            POOL_ISLAND: self._islands[current_island % config.island_count],
            POOL_ALL: sorted(self._candidates),
        }
        for name in POOL_ORDER[first:] + POOL_ORDER[:first]:
            pool = pools[name]
            if pool:
                return self._candidates[rng.choice(pool)], name
        raise DatabaseError("no non-empty sampling pool")

    def sample_parent(self, rng: Optional[random.Random] = None, config: Optional[IslandConfig] = None,
                      current_island: int = 0) -> Candidate:
        return self.sample_parent_with_pool(current_island, rng, config)[0]

    def sample_uniform(self, rng: Optional[random.Random] = None) -> Candidate:
        if not self._candidates:
            raise DatabaseError("cannot sample a parent from an empty database")
        rng = rng or self.rng
        return self._candidates[rng.choice(sorted(self._candidates))]

    def migrate(self, generation: int = 0, config: Optional[IslandConfig] = None) -> MigrationRecord:
        """
        Ring migration: copy each island's top fraction to both neighbours.

        Copies get fresh ids and keep the source lineage. A destination that
        already holds the same program (original or an earlier copy) is skipped.
        """
        config = config or self.config
        k = config.island_count
        record = MigrationRecord(generation=generation)

        snapshot = [list(members) for members in self._islands]
        plan = []
        for island, members in enumerate(snapshot):
            if not members:
                continue
            ranked = sorted(members, key=lambda cid: self._candidates[cid].sort_key())
            top = ranked[:math.ceil(config.migration_fraction * len(members))]
            destinations = sorted({(island - 1) % k, (island + 1) % k} - {island})
            for source_id in top:
                for dest in destinations:
                    plan.append((island, dest, source_id))

        for island, dest, source_id in plan:
            source = self._candidates[source_id]
            root = lineage_root(source)
            if any(lineage_root(self._candidates[cid]) == root for cid in self._islands[dest]):
                continue
            copy = replace(source, id=self._next_id, island=dest, migrated_from=root)
            self._next_id += 1
            self._store(copy)
            record.moves.append((island, dest, source_id, copy.id))

        if record:
            logger.info(f"Migration at generation {generation}: {len(record.moves)} copies")
        return record

    def to_dict(self) -> dict:
        version, internal, gauss = self.rng.getstate()
        return {
            "island_config": asdict(self.config),
            "archive_capacity": self.archive_capacity,
            "candidates": [c.to_dict() for c in self.candidates()],
            "islands": [list(members) for members in self._islands],
            "archive": list(self._archive),
            "next_id": self._next_id,
            "sequence": self._sequence,
            "rng_state": [version, list(internal), gauss],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ProgramDatabase":
        db = cls(IslandConfig(**data["island_config"]), archive_capacity=data["archive_capacity"])
        for raw in data["candidates"]:
            candidate = Candidate.from_dict(raw)
            db._candidates[candidate.id] = candidate
        db._islands = [list(members) for members in data["islands"]]
        db._archive = list(data["archive"])
        db._next_id = data["next_id"]
        db._sequence = data["sequence"]
        version, internal, gauss = data["rng_state"]
        db.rng.setstate((version, tuple(internal), gauss))
        return db

    def checkpoint(self, path, engine_state: Optional[dict] = None):
        """Write a self-describing checkpoint; the previous file stays intact until the write completes."""
        document = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "database": self.to_dict(),
            "engine": engine_state,
        }
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd, tmp_name = tempfile.mkstemp(prefix=".checkpoint-", dir=str(path.parent))
            with os.fdopen(fd, "w") as f:
                json.dump(document, f, sort_keys=True, indent=1)
                f.write("\n")
            os.replace(tmp_name, path)
        except OSError as e:
            raise CheckpointError(f"could not write checkpoint {path}: {e}")
        logger.debug(f"Checkpoint written to {path}")

    @classmethod
    def restore(cls, path) -> "ProgramDatabase":
        return load_checkpoint(path)[0]


def load_checkpoint(path) -> Tuple[ProgramDatabase, Optional[dict]]:
    """
    Restore a database and the optional engine block from a checkpoint file.

    Raises:
        CheckpointError: "checkpoint corrupt" for unreadable content, or a
            version message naming the expected format version
    """
    path = Path(path)
    try:
        with open(path, "r") as f:
            document = json.load(f)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}")
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CheckpointError(f"checkpoint corrupt: {path}: {e}")

    if isinstance(document, dict) and document.get("format") == CHECKPOINT_FORMAT \
            and document.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {document.get('version')} in {path}; "
            f"expected format version {CHECKPOINT_VERSION}"
        )
    try:
        jsonschema.validate(document, CHECKPOINT_SCHEMA)
        db = ProgramDatabase.from_dict(document["database"])
    except (jsonschema.ValidationError, KeyError, TypeError, ValueError, DatabaseError) as e:
        message = e.message if isinstance(e, jsonschema.ValidationError) else str(e)
        raise CheckpointError(
            f"checkpoint corrupt: {path}: {message} (expected format {CHECKPOINT_FORMAT} version {CHECKPOINT_VERSION})"
        )
    return db, document.get("engine")
