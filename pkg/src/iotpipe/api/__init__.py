"""Read-only HTTP API, min/max decimation and offline plot export."""

from .decimate import PlotSeries, bin_size, decimate
from .export import UnknownChannel, channel_file, load_series, plot_export, read_series_csv, series_csv
from .service import DEFAULT_PORT, ApiServer, ManagerStatus, RemoteStatus, serve
