"""
Plotly figures for training runs and predictions
"""
from pathlib import Path

import numpy as np
import pandas as pd
import plotly.graph_objects as go
from plotly.subplots import make_subplots

from core.pose_labels import DEFAULT_TOPOLOGY, SkeletonTopology

SPLIT_COLORS = {'train': '#5b9bd5', 'val': '#ed7d31', 'test': '#28a745'}


def create_training_curves(metrics: pd.DataFrame) -> go.Figure:
    """Loss, MPJPE and PCK@20 per epoch and split from a metrics.csv frame"""
    fig = make_subplots(rows=1, cols=3, subplot_titles=('Total loss', 'MPJPE', 'PCK@20'))
    curves = metrics[metrics['split'].isin(['train', 'val'])]
    for split, rows in curves.groupby('split', sort=False):
        color = SPLIT_COLORS.get(split, '#6c757d')
        for col, column in enumerate(('loss_total', 'mpjpe', 'pck20'), start=1):
            fig.add_trace(go.Scatter(
                x=rows['epoch'],
                y=rows[column],
                mode='lines+markers',
                name=split,
                legendgroup=split,
                showlegend=col == 1,
                line=dict(color=color),
            ), row=1, col=col)

    fig.update_xaxes(title_text='Epoch')
    fig.update_yaxes(range=[0, 1.05], row=1, col=3)
    fig.update_layout(title='Training curves', height=400, hovermode='x unified')
    return fig


def _skeleton_trace(pose: np.ndarray, topo: SkeletonTopology, name: str, color: str, dash: str = 'solid') -> go.Scatter:
    xs, ys = [], []
    for a, b in topo.edges:
        xs += [pose[a, 0], pose[b, 0], None]
        ys += [pose[a, 1], pose[b, 1], None]
    return go.Scatter(x=xs, y=ys, mode='lines+markers', name=name,
                      line=dict(color=color, dash=dash), marker=dict(size=6))


def create_pose_grid(pred: np.ndarray, gt: np.ndarray, topo: SkeletonTopology = DEFAULT_TOPOLOGY,
                     count: int = 6, image_coordinates: bool = False) -> go.Figure:
    count = min(count, len(pred))
    cols = min(count, 3) or 1
    rows = max(1, -(-count // cols))
    fig = make_subplots(rows=rows, cols=cols, subplot_titles=[f'window {i}' for i in range(count)])
    for i in range(count):
        r, c = i // cols + 1, i % cols + 1
        for trace in (_skeleton_trace(gt[i], topo, 'ground truth', '#28a745'),
                      _skeleton_trace(pred[i], topo, 'prediction', '#dc3545', dash='dash')):
            trace.showlegend = i == 0
            trace.legendgroup = trace.name
            fig.add_trace(trace, row=r, col=c)
    if image_coordinates:
        fig.update_yaxes(autorange='reversed')
    fig.update_layout(title='Predicted vs ground-truth poses', height=350 * rows)
    return fig


def create_csi_heatmap(values: np.ndarray, title: str = 'CSI window') -> go.Figure:
    """Channel x time heatmap of one window"""
    values = np.asarray(values)
    fig = go.Figure(data=go.Heatmap(z=values, colorscale='Viridis', colorbar=dict(title='amplitude')))
    fig.update_layout(title=title, xaxis_title='Tick', yaxis_title='Channel', height=500)
    return fig


def save_figure(fig: go.Figure, path) -> Path:
    path = Path(path)
    fig.write_html(str(path), include_plotlyjs='cdn')
    return path
