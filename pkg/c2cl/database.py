"""
SQLite run ledger
运行记录数据库
"""
import logging
from pathlib import Path
from typing import Optional

from sqlalchemy import create_engine
from sqlalchemy.engine import Engine
from sqlalchemy.orm import declarative_base, sessionmaker

logger = logging.getLogger(__name__)

Base = declarative_base()
SessionLocal = sessionmaker(autocommit=False, autoflush=False)

_engine: Optional[Engine] = None


def get_engine(path: Optional[str] = None, echo: bool = False) -> Engine:
    """Create the engine on first use; later calls with a new path rebind it"""
    global _engine
    if path is None:
        from .config_loader import get_current_config
        db_cfg = get_current_config().database
        path, echo = db_cfg.path, db_cfg.echo
    url = "sqlite://" if path == ":memory:" else f"sqlite:///{Path(path).resolve()}"
    if _engine is None or str(_engine.url) != url:
        if path != ":memory:":
            Path(path).parent.mkdir(parents=True, exist_ok=True)
        _engine = create_engine(url, echo=echo, connect_args={"check_same_thread": False})
        SessionLocal.configure(bind=_engine)
        logger.debug(f"Run ledger bound to {url}")
    return _engine


def get_db():
    db = SessionLocal()
    try:
        yield db
    finally:
        db.close()


def init_db(path: Optional[str] = None, echo: bool = False) -> Engine:
    from . import models  # noqa: F401
    engine = get_engine(path, echo)
    Base.metadata.create_all(bind=engine)
    return engine
