"""create run registry tables

Revision ID: 3c1f9a7d2b40
Revises: 
Create Date: 2026-10-16 10:12:07.431520

"""
from typing import Sequence, Union

from alembic import op
import sqlalchemy as sa


# revision identifiers, used by Alembic.
revision: str = '3c1f9a7d2b40'
down_revision: Union[str, None] = None
branch_labels: Union[str, Sequence[str], None] = None
depends_on: Union[str, Sequence[str], None] = None


def upgrade() -> None:
    op.create_table(
        'runs',
        sa.Column('id', sa.String(), nullable=False),
        sa.Column('name', sa.String(), nullable=True),
        sa.Column('mode', sa.String(), nullable=True),
        sa.Column('policy', sa.String(), nullable=True),
        sa.Column('buffer_size', sa.Integer(), nullable=True),
        sa.Column('seed', sa.Integer(), nullable=True),
        sa.Column('scenario_kind', sa.String(), nullable=True),
        sa.Column('status', sa.String(), nullable=True),
        sa.Column('run_dir', sa.String(), nullable=True),
        sa.Column('dataset_hash', sa.String(), nullable=True),
        sa.Column('grid_id', sa.String(), nullable=True),
        sa.Column('error', sa.String(), nullable=True),
        sa.PrimaryKeyConstraint('id'),
    )
    op.create_index(op.f('ix_runs_name'), 'runs', ['name'], unique=False)
    op.create_index(op.f('ix_runs_policy'), 'runs', ['policy'], unique=False)
    op.create_index(op.f('ix_runs_grid_id'), 'runs', ['grid_id'], unique=False)
    op.create_table(
        'step_metrics',
        sa.Column('id', sa.Integer(), nullable=False),
        sa.Column('run_id', sa.String(), nullable=True),
        sa.Column('step', sa.Integer(), nullable=True),
        sa.Column('name', sa.String(), nullable=True),
        sa.Column('value', sa.Float(), nullable=True),
        sa.ForeignKeyConstraint(['run_id'], ['runs.id'], ondelete='CASCADE'),
        sa.PrimaryKeyConstraint('id'),
    )
    op.create_index(op.f('ix_step_metrics_run_id'), 'step_metrics', ['run_id'], unique=False)


def downgrade() -> None:
    op.drop_index(op.f('ix_step_metrics_run_id'), table_name='step_metrics')
    op.drop_table('step_metrics')
    op.drop_index(op.f('ix_runs_grid_id'), table_name='runs')
    op.drop_index(op.f('ix_runs_policy'), table_name='runs')
    op.drop_index(op.f('ix_runs_name'), table_name='runs')
    op.drop_table('runs')
