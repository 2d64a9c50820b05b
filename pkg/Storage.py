"""File-format primitives shared by the pipeline modules, and threaded artifact writing."""
from Util import PipelineError
import typing as t
import threading
import logging
import queue
import json
import enum
import csv
import io
import os
logger = logging.getLogger(__name__)
status_codes = enum.Enum("status_codes", "SUCCESS ERROR")
ENCODING = "utf-8"
# Input files may start with a byte order mark.
READ_ENCODING = "utf-8-sig"


def read_csv(file_path: str, header: t.Sequence[str]) -> t.List[t.Tuple[int, t.List[str]]]:
    """Reads a CSV file whose first line must equal 'header'. Returns (line number, fields) for every data row, line
    numbers counted from 1 like a text editor does. Blank lines are skipped."""
    if not os.path.isfile(file_path):
        raise DocumentError(file_path, "file not found")
    rows = []
    try:
        with open(file_path, "r", encoding=READ_ENCODING, newline="") as file:
            reader = csv.reader(file)
            try:
                found = next(reader)
            except StopIteration:
                raise DocumentError(file_path, "file is empty, expected header '{}'".format(",".join(header)))
            if [field.strip() for field in found] != list(header):
                raise DocumentError(file_path, "expected header '{}', found '{}'"
                                    .format(",".join(header), ",".join(found)), 1)
            for fields in reader:
                if not fields or (len(fields) == 1 and not fields[0].strip()):
                    continue
                rows.append((reader.line_num, fields))
    except (OSError, UnicodeDecodeError, csv.Error) as error:
        raise DocumentError(file_path, "could not be read ({})".format(error))
    return rows


def render_csv(header: t.Sequence[str], rows: t.Iterable[t.Sequence[str]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buffer.getvalue()


def render_json(document: t.Any) -> str:
    return json.dumps(document, indent=2, allow_nan=False) + "\n"


def read_text(file_path: str) -> str:
    try:
        with open(file_path, "r", encoding=READ_ENCODING, newline="") as file:
            return file.read()
    except (OSError, UnicodeDecodeError) as error:
        raise DocumentError(file_path, "could not be read ({})".format(error))


def write_file(file_path: str, content: t.Union[str, bytes]) -> None:
    parent = os.path.dirname(file_path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    if isinstance(content, bytes):
        with open(file_path, "wb") as file:
            file.write(content)
    else:
        with open(file_path, "w", encoding=ENCODING, newline="") as file:
            file.write(content)


class ArtifactWriter:
    def __init__(self, root_dir: str):
        """Writes artifacts to disk from one background thread. Producers only queue (relative path, content) jobs, so
        every file is written whole and in submission order no matter how many workers produced them."""
        self.root_dir = root_dir
        self.pending_tasks = queue.Queue()
        self.results: t.List[t.Tuple[enum.Enum, str, str]] = []
        self.closed = False
        self.writer = threading.Thread(target=self.writer_thread, daemon=True)
        self.writer.start()

    def submit(self, rel_path: str, content: t.Union[str, bytes]) -> None:
        if self.closed:
            raise RuntimeError("ArtifactWriter is closed")
        self.pending_tasks.put((rel_path, content))

    def writer_thread(self) -> None:
        while True:
            task = self.pending_tasks.get()
            if task is None:
                break
            self.results.append(self.write_artifact(*task))

    def write_artifact(self, rel_path: str, content: t.Union[str, bytes]) -> t.Tuple[enum.Enum, str, str]:
        full_path = os.path.join(self.root_dir, rel_path)
        try:
            write_file(full_path, content)
        except OSError as error:
            logger.error("Could not write %s: %s", full_path, error)
            return status_codes.ERROR, rel_path, str(error)
        logger.debug("Wrote %s", full_path)
        return status_codes.SUCCESS, rel_path, ""

    def close(self) -> t.List[t.Tuple[str, str]]:
        """Waits until every queued artifact is on disk. Returns (path, reason) for each artifact that failed."""
        if not self.closed:
            self.closed = True
            self.pending_tasks.put(None)
            self.writer.join()
        return [(rel_path, reason) for status, rel_path, reason in self.results if status == status_codes.ERROR]

    def get_written(self) -> t.List[str]:
        return [rel_path for status, rel_path, _ in self.results if status == status_codes.SUCCESS]


class DocumentError(PipelineError):
    def __init__(self, file_path: str, reason: str, line: t.Optional[int] = None):
        """Raised when a file is missing, unreadable or does not follow its documented layout."""
        where = file_path if line is None else "{}, line {}".format(file_path, line)
        super().__init__("{}: {}".format(where, reason), stage="io")
        self.file_path = file_path
        self.line = line

    def get_file_path(self) -> str:
        return self.file_path

    def get_line(self) -> t.Optional[int]:
        return self.line
