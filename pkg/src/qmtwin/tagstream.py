"""QTT1 time-tag files, shot folding and arrival-time histograms.

File layout (little-endian)::

    header, 32 bytes
        magic "QTT1" | version u16 | header_len u16 | clock_resolution_ps u64
        | f_rep_mHz u64 | t_int_ms u32 | n_channels u16 | reserved u16
    record, 16 bytes
        timestamp_ps u64 | channel u16 | reserved 6 bytes

Channel 0 carries one sync tag per shot at the write pulse centre t_0,
channel 1 the signal APD and channel 2 the monitor APD.
"""
from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass
from typing import IO, BinaryIO, Iterable, Iterator, NamedTuple, Union

import numpy as np

from .model import DetectionWindow

MAGIC = b"QTT1"
VERSION = 1
HEADER = struct.Struct("<4sHHQQIHH")
HEADER_SIZE = HEADER.size
RECORD_DTYPE = np.dtype([("timestamp", "<u8"), ("channel", "<u2"), ("reserved", "V6")])
RECORD_SIZE = RECORD_DTYPE.itemsize

SYNC = 0
SIGNAL = 1
MONITOR = 2
CHANNEL_NAMES = {SYNC: "sync", SIGNAL: "signal", MONITOR: "monitor"}

DEFAULT_BIN_WIDTH = 5  # ps

Source = Union[bytes, bytearray, memoryview, str, "os.PathLike[str]", BinaryIO]

assert HEADER_SIZE == 32 and RECORD_SIZE == 16


class TagFormatError(ValueError):
    """Malformed tag file.  ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class TimeTagRecord(NamedTuple):
    timestamp: int
    channel: int


@dataclass(frozen=True)
class TagHeader:
    """Acquisition metadata stored in the file header.

    Rates are kept as the integers the format stores so a header survives a
    write/read cycle unchanged.
    """

    f_rep_mhz: int
    t_int_ms: int
    n_channels: int = 3
    version: int = VERSION
    clock_resolution_ps: int = 1

    @classmethod
    def from_rates(cls, f_rep: float, t_int: float, n_channels: int = 3) -> TagHeader:
        return cls(int(round(f_rep * 1000)), int(round(t_int * 1000)), n_channels)

    @property
    def f_rep(self) -> float:
        return self.f_rep_mhz / 1000.0

    @property
    def t_int(self) -> float:
        return self.t_int_ms / 1000.0

    @property
    def n_shots(self) -> int:
        return self.f_rep_mhz * self.t_int_ms // 1_000_000

    @property
    def channel_map(self) -> dict[int, str]:
        return {ch: CHANNEL_NAMES.get(ch, f"ch{ch}") for ch in range(self.n_channels)}

    def pack(self) -> bytes:
        return HEADER.pack(MAGIC, self.version, HEADER_SIZE, self.clock_resolution_ps,
                           self.f_rep_mhz, self.t_int_ms, self.n_channels, 0)

    @classmethod
    def unpack(cls, raw: bytes) -> TagHeader:
        if len(raw) < HEADER_SIZE:
            raise TagFormatError(f"truncated header: {len(raw)} of {HEADER_SIZE} bytes", len(raw))
        magic, version, header_len, clock, f_rep_mhz, t_int_ms, n_channels, _ = HEADER.unpack(raw[:HEADER_SIZE])
        if magic != MAGIC:
            raise TagFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
        if version != VERSION:
            raise TagFormatError(f"unsupported version {version}", 4)
        if header_len != HEADER_SIZE:
            raise TagFormatError(f"unsupported header length {header_len}", 6)
        if clock != 1:
            raise TagFormatError(f"unsupported clock resolution {clock} ps", 8)
        return cls(f_rep_mhz, t_int_ms, n_channels, version, clock)


def as_record_array(records: Iterable[TimeTagRecord] | np.ndarray) -> np.ndarray:
    """Coerce records to a structured array with :data:`RECORD_DTYPE`."""
    if isinstance(records, np.ndarray):
        if records.dtype == RECORD_DTYPE:
            return records
        out = np.zeros(len(records), RECORD_DTYPE)
        out["timestamp"] = records["timestamp"]
        out["channel"] = records["channel"]
        return out
    records = list(records)
    out = np.zeros(len(records), RECORD_DTYPE)
    if records:
        arr = np.asarray(records, dtype=np.int64)
        out["timestamp"] = arr[:, 0]
        out["channel"] = arr[:, 1]
    return out


def make_records(timestamps: np.ndarray, channels: np.ndarray) -> np.ndarray:
    out = np.zeros(len(timestamps), RECORD_DTYPE)
    out["timestamp"] = timestamps
    out["channel"] = channels
    return out


def write_tag_file(records: Iterable[TimeTagRecord] | np.ndarray, header: TagHeader,
                   fh: IO[bytes] | None = None) -> bytes | None:
    """Serialise ``records`` after ``header``.

    Returns the bytes when ``fh`` is None, otherwise writes to ``fh``.
    Records must already be sorted by timestamp; they are never reordered.
    """
    arr = as_record_array(records)
    ts = arr["timestamp"]
    if len(ts) > 1 and np.any(ts[1:] < ts[:-1]):
        first = int(np.argmax(ts[1:] < ts[:-1])) + 1
        raise ValueError(f"records are not sorted by timestamp (record {first})")
    if len(arr) and int(arr["channel"].max()) >= header.n_channels:
        raise ValueError(f"channel {int(arr['channel'].max())} outside header n_channels={header.n_channels}")
    if arr["reserved"].any():
        arr = make_records(arr["timestamp"], arr["channel"])
    payload = arr.tobytes()
    if fh is None:
        return header.pack() + payload
    fh.write(header.pack())
    fh.write(payload)
    return None


def _open(source: Source) -> tuple[BinaryIO, bool]:
    if isinstance(source, (bytes, bytearray, memoryview)):
        return io.BytesIO(source), True
    if isinstance(source, (str, os.PathLike)):
        return open(source, "rb"), True
    return source, False


def iter_tag_chunks(source: Source, chunk_records: int = 1 << 20) -> tuple[TagHeader, Iterator[np.ndarray]]:
    """Parse the header eagerly and return a lazy iterator over record chunks."""
    fh, owned = _open(source)
    try:
        header = TagHeader.unpack(fh.read(HEADER_SIZE))
    except BaseException:
        if owned:
            fh.close()
        raise

    def chunks() -> Iterator[np.ndarray]:
        offset = HEADER_SIZE
        try:
            while True:
                raw = fh.read(chunk_records * RECORD_SIZE)
                if not raw:
                    return
                whole = len(raw) // RECORD_SIZE * RECORD_SIZE
                if whole != len(raw):
                    raise TagFormatError(
                        f"truncated record: {len(raw) - whole} trailing bytes", offset + whole)
                offset += len(raw)
                yield np.frombuffer(raw, dtype=RECORD_DTYPE)
        finally:
            if owned:
                fh.close()

    return header, chunks()


def read_tag_array(source: Source) -> tuple[TagHeader, np.ndarray]:
    """Read a whole file into one structured array."""
    if isinstance(source, (bytes, bytearray, memoryview)):
        raw = bytes(source)
    else:
        fh, owned = _open(source)
        try:
            raw = fh.read()
        finally:
            if owned:
                fh.close()
    header = TagHeader.unpack(raw)
    body = len(raw) - HEADER_SIZE
    if body % RECORD_SIZE:
        whole = body // RECORD_SIZE * RECORD_SIZE
        raise TagFormatError(f"truncated record: {body - whole} trailing bytes", HEADER_SIZE + whole)
    return header, np.frombuffer(raw, dtype=RECORD_DTYPE, offset=HEADER_SIZE)


def read_tag_file(source: Source) -> tuple[TagHeader, Iterator[TimeTagRecord]]:
    """Header plus an iterator yielding records in file order."""
    header, chunks = iter_tag_chunks(source)

    def records() -> Iterator[TimeTagRecord]:
        for chunk in chunks:
            for ts, ch in zip(chunk["timestamp"].tolist(), chunk["channel"].tolist()):
                yield TimeTagRecord(ts, ch)

    return header, records()


# -- folding and binning -----------------------------------------------------

@dataclass
class FoldedHistogram:
    """Per-shot arrival-time histogram.

    Bin ``k`` covers folded times ``[origin + k*bin_width, origin + (k+1)*bin_width)``.
    ``orphans`` counts clicks that precede the first sync, ``dropped`` clicks
    that fold beyond the histogram span.
    """

    bin_width: int
    origin: int
    counts: np.ndarray
    n_shots: int = 0
    channel: int = SIGNAL
    orphans: int = 0
    dropped: int = 0

    @property
    def n_bins(self) -> int:
        return len(self.counts)

    @property
    def span(self) -> int:
        return self.n_bins * self.bin_width

    @property
    def end(self) -> int:
        return self.origin + self.span

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + self.orphans + self.dropped

    def bin_starts(self) -> np.ndarray:
        return self.origin + self.bin_width * np.arange(self.n_bins, dtype=np.int64)

    def __add__(self, other: FoldedHistogram) -> FoldedHistogram:
        if (self.bin_width, self.origin, self.n_bins, self.channel) != (
                other.bin_width, other.origin, other.n_bins, other.channel):
            raise ValueError("histograms have different binning or channel")
        return FoldedHistogram(self.bin_width, self.origin, self.counts + other.counts,
                               self.n_shots + other.n_shots, self.channel,
                               self.orphans + other.orphans, self.dropped + other.dropped)

    def rebin(self, factor: int) -> FoldedHistogram:
        """Merge ``factor`` adjacent bins; a ragged tail bin is kept."""
        if factor < 1:
            raise ValueError("rebin factor must be >= 1")
        pad = (-self.n_bins) % factor
        counts = np.concatenate([self.counts, np.zeros(pad, self.counts.dtype)])
        return FoldedHistogram(self.bin_width * factor, self.origin, counts.reshape(-1, factor).sum(axis=1),
                               self.n_shots, self.channel, self.orphans, self.dropped)

    def to_csv(self, fh: IO[str]) -> None:
        fh.write("bin_start_ps,count\n")
        for start, count in zip(self.bin_starts().tolist(), self.counts.tolist()):
            fh.write(f"{start},{count}\n")


def _n_bins(span: int, bin_width: int) -> int:
    if bin_width <= 0 or span <= 0:
        raise ValueError("bin_width and span must be positive")
    return -(-span // bin_width)


class HistogramAccumulator:
    """Streaming fold-and-bin over time-ordered record chunks.

    A click belongs to the most recent sync ``s`` with ``s + origin <= t``.
    With a negative origin that sync may arrive after the click, so clicks
    close to the end of a chunk are held back until the next chunk (or
    :meth:`result`) settles them.
    """

    def __init__(self, bin_width: int, span: int, origin: int = 0,
                 sync_channel: int = SYNC, target_channel: int = SIGNAL):
        self.bin_width = int(bin_width)
        self.origin = int(origin)
        self.sync_channel = sync_channel
        self.target_channel = target_channel
        self.counts = np.zeros(_n_bins(span, bin_width), np.int64)
        self.n_shots = 0
        self.orphans = 0
        self.dropped = 0
        self._last_sync: int | None = None
        self._last_ts: int | None = None
        self._pending = np.empty(0, np.int64)

    def _bin(self, targets: np.ndarray, syncs: np.ndarray) -> None:
        if not len(targets):
            return
        idx = np.searchsorted(syncs, targets - self.origin, side="right") - 1
        orphan = idx < 0
        self.orphans += int(orphan.sum())
        folded = targets[~orphan] - syncs[idx[~orphan]]
        b = (folded - self.origin) // self.bin_width
        inside = b < len(self.counts)
        self.dropped += int((~inside).sum())
        self.counts += np.bincount(b[inside], minlength=len(self.counts))

    def feed(self, chunk: np.ndarray) -> None:
        if not len(chunk):
            return
        ts = chunk["timestamp"].astype(np.int64)
        ch = chunk["channel"]
        if np.any(ts[1:] < ts[:-1]) or (self._last_ts is not None and ts[0] < self._last_ts):
            raise ValueError("streaming fold needs records sorted by timestamp")
        syncs = ts[ch == self.sync_channel]
        self.n_shots += len(syncs)
        if self._last_sync is not None:
            syncs = np.concatenate([[self._last_sync], syncs])
        targets = np.concatenate([self._pending, ts[ch == self.target_channel]])
        last_ts = int(ts[-1])
        hold = targets - self.origin >= last_ts
        self._bin(targets[~hold], syncs)
        self._pending = targets[hold]
        if len(syncs):
            self._last_sync = int(syncs[-1])
        self._last_ts = last_ts

    def result(self) -> FoldedHistogram:
        syncs = np.array([] if self._last_sync is None else [self._last_sync], np.int64)
        self._bin(self._pending, syncs)
        self._pending = np.empty(0, np.int64)
        return FoldedHistogram(self.bin_width, self.origin, self.counts.copy(), self.n_shots,
                               self.target_channel, self.orphans, self.dropped)


def fold_times(records: Iterable[TimeTagRecord] | np.ndarray, sync_channel: int = SYNC,
               target_channel: int = SIGNAL, origin: int = 0) -> tuple[np.ndarray, int, int]:
    """Folded times of every target click.

    Returns ``(folded, n_orphans, n_syncs)``; orphans (no sync at or before
    ``t - origin``) are excluded from ``folded``.
    """
    arr = as_record_array(records)
    ts = arr["timestamp"].astype(np.int64)
    ch = arr["channel"]
    syncs = ts[ch == sync_channel]
    if np.any(syncs[1:] < syncs[:-1]):
        syncs = np.sort(syncs)
    targets = ts[ch == target_channel]
    idx = np.searchsorted(syncs, targets - origin, side="right") - 1
    ok = idx >= 0
    return targets[ok] - syncs[idx[ok]], int((~ok).sum()), len(syncs)


def fold_and_bin(records: Iterable[TimeTagRecord] | np.ndarray, sync_channel: int = SYNC,
                 bin_width: int = DEFAULT_BIN_WIDTH, span: int = 1_000_000,
                 target_channel: int = SIGNAL, origin: int = 0) -> FoldedHistogram:
    """Fold target clicks onto the per-shot frame and histogram them.

    Each click gets ``t - s`` where ``s`` is the latest sync with
    ``s <= t - origin``; bins are half-open and start at ``origin``.
    """
    folded, orphans, n_syncs = fold_times(records, sync_channel, target_channel, origin)
    return bin_folded(folded, bin_width, span, origin, n_syncs, target_channel, orphans)


def bin_folded(folded: np.ndarray, bin_width: int, span: int, origin: int = 0, n_shots: int = 0,
               channel: int = SIGNAL, orphans: int = 0) -> FoldedHistogram:
    """Histogram already-folded times (all assumed ``>= origin``)."""
    counts = np.zeros(_n_bins(span, bin_width), np.int64)
    b = (np.asarray(folded, np.int64) - origin) // bin_width
    inside = b < len(counts)
    counts += np.bincount(b[inside], minlength=len(counts))
    return FoldedHistogram(int(bin_width), int(origin), counts, n_shots, channel,
                           orphans, int((~inside).sum()))


def fold_and_bin_stream(chunks: Iterable[np.ndarray], sync_channel: int = SYNC,
                        bin_width: int = DEFAULT_BIN_WIDTH, span: int = 1_000_000,
                        target_channel: int = SIGNAL, origin: int = 0) -> FoldedHistogram:
    acc = HistogramAccumulator(bin_width, span, origin, sync_channel, target_channel)
    for chunk in chunks:
        acc.feed(chunk)
    return acc.result()


def window_sum(hist: FoldedHistogram | np.ndarray, w: DetectionWindow) -> int:
    """Number of clicks with folded time in ``[w.start, w.end)``.

    ``hist`` is either a histogram, whose bin edges must line up with the
    window, or a plain array of folded times.
    """
    if not isinstance(hist, FoldedHistogram):
        folded = np.asarray(hist)
        return int(np.count_nonzero((folded >= w.start) & (folded < w.end)))
    if w.start < hist.origin or w.end > hist.end:
        raise ValueError(f"window {w} outside histogram span [{hist.origin}, {hist.end}) ps")
    lo, rem_lo = divmod(w.start - hist.origin, hist.bin_width)
    hi, rem_hi = divmod(w.end - hist.origin, hist.bin_width)
    if rem_lo or rem_hi:
        raise ValueError(f"window {w} not aligned to {hist.bin_width} ps bin edges")
    return int(hist.counts[lo:hi].sum())
