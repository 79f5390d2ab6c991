"""Exception types shared across the toolkit.

Every error raised on a user-facing contract violation subclasses
:class:`VarirError`, so callers can catch one type at the CLI boundary.
"""

from __future__ import annotations


class VarirError(Exception):
    """Base class for all toolkit errors."""


# --- file and record level ---------------------------------------------------

class IoFailure(VarirError):
    """A file could not be opened, read, or decoded as UTF-8."""


class MalformedRecord(VarirError):
    """A record violates the column or field contract of its format.

    Messages include the 1-based record index within the offending file.
    """


class DuplicateId(VarirError):
    """An identifier appears more than once where uniqueness is required."""


class NegativeGrade(VarirError):
    """A relevance grade below zero was encountered."""


class NonContiguousRanks(VarirError):
    """Ranks within one query of a run file are not 1..n without gaps."""


# --- rule files and variety generation ---------------------------------------

class RuleSyntaxError(VarirError):
    """A rule file line does not match the grammar. Carries the line number."""


class EmptyLhs(VarirError):
    """A rewrite rule with an empty left-hand side."""


class DuplicateLexiconKey(VarirError):
    """The same source word is mapped twice in one lexicon."""


class EmptyPool(VarirError):
    """A family spec with no rules to sample from."""


# --- indexing and encoding ----------------------------------------------------

class EmptyCollection(VarirError):
    """An operation that needs at least one document got none."""


class EmptyToken(VarirError):
    """A zero-length token reached the subword hasher."""


class EmptyText(VarirError):
    """A text produced no tokens under the active analyzer."""


class DegenerateEmbedding(VarirError):
    """A vector with norm below 1e-12 cannot be normalized."""


class DimensionMismatch(VarirError):
    """Two vector sets with incompatible dimensions."""


class StaleEncodings(VarirError):
    """Stored document encodings were produced by different parameters."""


class UnknownDocId(VarirError):
    """A document id is absent from the store or collection."""


# --- training -----------------------------------------------------------------

class NoPositives(VarirError):
    """No training triplet could be built: no query had a positive."""


class NonFiniteLoss(VarirError):
    """The training loss left the finite range."""


class MissingTrainedParams(VarirError):
    """A pipeline step expected checkpoints from a previous step."""


# --- evaluation ---------------------------------------------------------------

class QuerySetMismatch(VarirError):
    """Two reports cover different query sets and cannot be compared."""


# --- experiment configuration --------------------------------------------------

class ConfigInvalid(VarirError):
    """An experiment config file has unknown keys or inconsistent values."""


class PairNotUnseen(VarirError):
    """A pair offered as unseen was already used for training."""


class FamilyOverlap(VarirError):
    """A pair offered as cross-family belongs to the training family."""
