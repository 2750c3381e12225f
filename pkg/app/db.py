import hashlib
import json
import logging
import sqlite3

from .config import EMBED_DB_PATH

logger = logging.getLogger(__name__)

EMBED_BATCH_SIZE = 8


def get_db(db_path=None):
    conn = sqlite3.connect(db_path or EMBED_DB_PATH)
    conn.row_factory = sqlite3.Row
    return conn


def init_db(conn):
    conn.execute(
        """
        CREATE TABLE IF NOT EXISTS embeddings (
            id INTEGER PRIMARY KEY AUTOINCREMENT,
            checkpoint_hash TEXT NOT NULL,
            subject TEXT NOT NULL,
            condition TEXT NOT NULL,
            seq INTEGER NOT NULL,
            view TEXT,
            embedding_json TEXT NOT NULL
        )
        """
    )
    conn.execute(
        """
        CREATE TABLE IF NOT EXISTS meta (
            key TEXT PRIMARY KEY,
            value TEXT NOT NULL
        )
        """
    )
    conn.commit()


def get_meta(conn, key):
    row = conn.execute("SELECT value FROM meta WHERE key = ?", (key,)).fetchone()
    return row["value"] if row else None


def set_meta(conn, key, value):
    conn.execute(
        "INSERT OR REPLACE INTO meta (key, value) VALUES (?, ?)",
        (key, value),
    )
    conn.commit()


def records_fingerprint(records):
    digest = hashlib.sha256()
    for record in records:
        digest.update(record.name.encode("utf-8"))
        digest.update(record.data.tobytes())
    return digest.hexdigest()


def _rebuild_index(conn, model, records, checkpoint_hash):
    conn.execute("DELETE FROM embeddings")
    conn.commit()
    to_insert = []
    for start in range(0, len(records), EMBED_BATCH_SIZE):
        batch = records[start : start + EMBED_BATCH_SIZE]
        embeddings = model.embed([record.data for record in batch], batch_size=EMBED_BATCH_SIZE)
        for record, embedding in zip(batch, embeddings):
            to_insert.append(
                (
                    checkpoint_hash,
                    str(record.subject),
                    record.condition,
                    record.seq,
                    None if record.view is None else str(record.view),
                    json.dumps([float(value) for value in embedding]),
                )
            )
    conn.executemany(
        """
        INSERT INTO embeddings (checkpoint_hash, subject, condition, seq, view, embedding_json)
        VALUES (?, ?, ?, ?, ?, ?)
        """,
        to_insert,
    )
    conn.commit()
    return len(to_insert)


def ensure_embedding_index(model, records, db_path, checkpoint_hash):
    """Embed ``records`` into the store unless the same checkpoint already indexed them.

    Returns True when the index was rebuilt.
    """
    fingerprint = records_fingerprint(records)
    conn = get_db(db_path)
    try:
        init_db(conn)
        row_count = conn.execute("SELECT COUNT(*) AS count FROM embeddings").fetchone()["count"]
        if (
            get_meta(conn, "checkpoint_hash") == checkpoint_hash
            and get_meta(conn, "records_fingerprint") == fingerprint
            and row_count > 0
        ):
            logger.info("embedding index %s is current (%d rows)", db_path, row_count)
            return False
        written = _rebuild_index(conn, model, records, checkpoint_hash)
        set_meta(conn, "checkpoint_hash", checkpoint_hash)
        set_meta(conn, "records_fingerprint", fingerprint)
        logger.info("embedded %d clip(s) into %s", written, db_path)
        return True
    finally:
        conn.close()


def load_embeddings(db_path):
    conn = get_db(db_path)
    try:
        init_db(conn)
        rows = conn.execute(
            "SELECT subject, condition, seq, view, embedding_json FROM embeddings ORDER BY id ASC"
        ).fetchall()
    finally:
        conn.close()
    return [
        {
            "subject": row["subject"],
            "condition": row["condition"],
            "seq": row["seq"],
            "view": row["view"],
            "embedding": json.loads(row["embedding_json"]),
        }
        for row in rows
    ]
