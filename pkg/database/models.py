from sqlalchemy import Column, Float, ForeignKey, Integer, String
from sqlalchemy.orm import relationship
import uuid
from .database import Base


class Run(Base):
    __tablename__ = "runs"

    id = Column(String, primary_key=True, default=lambda: str(uuid.uuid4()))
    name = Column(String, index=True)
    mode = Column(String, default="continual")
    policy = Column(String, index=True)
    buffer_size = Column(Integer)
    seed = Column(Integer)
    scenario_kind = Column(String)
    status = Column(String, default="running")
    run_dir = Column(String)
    dataset_hash = Column(String)
    grid_id = Column(String, index=True, nullable=True)
    error = Column(String, nullable=True)

    steps = relationship("StepMetric", back_populates="run", cascade="all, delete-orphan",
                         order_by="StepMetric.step")


class StepMetric(Base):
    __tablename__ = "step_metrics"

    id = Column(Integer, primary_key=True)
    run_id = Column(String, ForeignKey("runs.id", ondelete="CASCADE"), index=True)
    step = Column(Integer)
    name = Column(String)
    value = Column(Float, nullable=True)

    run = relationship("Run", back_populates="steps")
