"""
SQLAlchemy models for the run ledger
运行记录模型
"""
from datetime import datetime

from sqlalchemy import Column, DateTime, Float, ForeignKey, Integer, String, Text
from sqlalchemy.orm import relationship

from .database import Base


class RunRecord(Base):
    """一次 verify / search / seg-eval 运行"""
    __tablename__ = "run_records"

    id = Column(Integer, primary_key=True, index=True)
    command = Column(String(20), nullable=False)  # 'verify', 'search', 'seg-eval'
    config_hash = Column(String(64))
    seed = Column(Integer, default=0)
    total = Column(Integer, default=0)
    processed = Column(Integer, default=0)
    failed = Column(Integer, default=0)

    # 核心指标
    eer = Column(Float)
    rank1 = Column(Float)
    mean_iou = Column(Float)

    status = Column(String(20), default='success')  # 'success', 'failed', 'partial'
    message = Column(Text)
    created_at = Column(DateTime, default=datetime.utcnow)

    failures = relationship("FailureLog", back_populates="run", cascade="all, delete-orphan")


class FailureLog(Base):
    """单条处理失败"""
    __tablename__ = "failure_logs"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("run_records.id"), nullable=False, index=True)
    item_id = Column(String(200), nullable=False)
    stage = Column(String(30))
    error_type = Column(String(60))
    message = Column(Text)
    created_at = Column(DateTime, default=datetime.utcnow)

    run = relationship("RunRecord", back_populates="failures")
