from app.database import create_tables


def startup() -> None:
    # called once before the first command
    create_tables()
