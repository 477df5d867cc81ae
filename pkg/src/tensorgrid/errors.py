"""Exception types shared across the package.

Errors that can cross the wire carry a stable status code (see
``protocol.Status``); everything else is local to one subsystem.
"""

from __future__ import annotations


class TensorGridError(Exception):
    """Base class for all package errors."""


# --- tensor / dataset construction ---------------------------------------

class BadShape(TensorGridError):
    """Shape has a non-positive dim, zero dims, or too many dims."""


class ShapeMismatch(TensorGridError):
    """Payload length or operand shapes do not agree."""


class BadDType(TensorGridError):
    """Unknown dtype code."""


class Truncated(TensorGridError):
    """Byte buffer ends before the encoded structure does."""


class DuplicateName(TensorGridError):
    """Name already present in a dataset."""


# --- routing ---------------------------------------------------------------

class EmptyKey(TensorGridError):
    """Keys must be non-empty strings."""


class BadCount(TensorGridError):
    """Invalid shard count for topology planning."""


class BadTopology(TensorGridError):
    """Slot ranges do not partition the slot space."""


# --- executable artifacts --------------------------------------------------

class BadMagic(TensorGridError):
    """Model blob does not start with the expected magic."""


class BadVersion(TensorGridError):
    """Unsupported model blob version."""


class DimMismatch(TensorGridError):
    """Adjacent dense layers disagree on width."""


class WidthMismatch(TensorGridError):
    """Input batch width does not match the model input width."""


class DTypeMismatch(TensorGridError):
    """Operand dtype not accepted by the operation."""


class ArityMismatch(TensorGridError):
    """Script invoked with the wrong number of inputs."""


class DomainError(TensorGridError):
    """Value outside an operation's mathematical domain."""


class BadScript(TensorGridError):
    """Script document is malformed or self-inconsistent."""


# --- wire / server ---------------------------------------------------------

class ProtocolError(TensorGridError):
    """Frame violates the wire protocol."""


class NotFound(TensorGridError):
    """Key not present on the owning shard."""


class WrongShard(TensorGridError):
    """Key's slot is owned by another shard.

    ``owner`` is the shard id that does own the slot.
    """

    def __init__(self, message: str, owner: int, slot: int | None = None):
        super().__init__(message)
        self.owner = owner
        self.slot = slot


class Malformed(TensorGridError):
    """Request body could not be decoded or validated."""


class WrongKind(TensorGridError):
    """Key holds a value of a different kind than requested."""


class ModelNotFound(TensorGridError):
    """No model stored under the requested name."""


class ExecError(TensorGridError):
    """Model or script execution failed; message carries the cause."""


class InputMissing(TensorGridError):
    """An execution input key is not resident on the shard."""


class BadModel(TensorGridError):
    """SET_MODEL blob rejected by the loader."""


# --- client ----------------------------------------------------------------

class Unreachable(TensorGridError):
    """No shard answered at the given address."""


class ProtocolVersionMismatch(TensorGridError):
    """Peer speaks a different protocol version."""


class PartialBroadcast(TensorGridError):
    """A broadcast reached only part of the cluster.

    ``failed`` maps shard id -> error for every shard that did not ack.
    """

    def __init__(self, message: str, failed: dict[int, Exception]):
        super().__init__(message)
        self.failed = failed


# --- launcher ---------------------------------------------------------------

class UnequalLengths(TensorGridError):
    """Step strategy requires equal-length value lists."""


class EmptyParams(TensorGridError):
    """Permutation strategies need at least one parameter."""


class MissingParam(TensorGridError):
    """Template token has no matching parameter value."""


class TemplateNotFound(TensorGridError):
    """Referenced template file does not exist."""


class SpawnFailed(TensorGridError):
    """Member process could not be started."""


class AlreadyRunning(TensorGridError):
    """Entity has live processes."""


class NotGenerated(TensorGridError):
    """Entity must be generated before it can start."""


class PortInUse(TensorGridError):
    """Requested listen port is already bound."""


class ShardStartTimeout(TensorGridError):
    """A launched shard never answered PING."""


# --- bench / stats -----------------------------------------------------------

class EmptyGroup(TensorGridError):
    """Summary statistics requested over zero samples."""


class CellFailed(TensorGridError):
    """One benchmark matrix cell aborted."""


# --- feature pipeline --------------------------------------------------------

class DegenerateFeature(TensorGridError):
    """Feature has zero variance; cannot standardize."""


class DegenerateRange(TensorGridError):
    """All values identical; histogram range is empty."""
