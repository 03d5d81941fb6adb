import os
from sqlmodel import SQLModel, create_engine, Session

# Import the table models so they're registered on the metadata.
from app.models import RunRecord, StageRecord  # noqa: F401

DATABASE_URL = os.environ.get("APP_DATABASE_URL", "sqlite:///fraclinf_runs.db")
ENGINE = create_engine(DATABASE_URL, connect_args={"check_same_thread": False} if DATABASE_URL.startswith("sqlite") else {})


def create_tables():
    SQLModel.metadata.create_all(ENGINE)


def get_session():
    return Session(ENGINE)


def reset_db():
    """Wipe the run registry. Use with caution - for testing only!"""
    SQLModel.metadata.drop_all(ENGINE)
    SQLModel.metadata.create_all(ENGINE)
