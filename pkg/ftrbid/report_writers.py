import abc
import pathlib
from typing import Dict, List, Union

import pandas
import tabulate

# Decimal places of every float written to a table.
PRECISION = 4


def _title(name: str) -> str:
    """
    Converts a table or column name to a title:

    >>> _title("table_fcp_rcp")
    'Fcp Rcp'
    """
    if name.startswith("table_"):
        name = name[len("table_"):]
    return name.replace("_", " ").title()


def _rounded(df: pandas.DataFrame) -> pandas.DataFrame:
    """
    Rounds float columns to the table precision, folding negative zeros into zero.
    """
    df = df.copy()
    for column in df.columns:
        if pandas.api.types.is_float_dtype(df[column]):
            df[column] = df[column].round(PRECISION) + 0.0
    return df


class ReportWriter(metaclass=abc.ABCMeta):
    name = None

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        pass

    @abc.abstractmethod
    def write(self, report: "RunReport"):
        ...


class CSVWriter(ReportWriter):
    """
    Writes every table of a report as its own CSV file, plus the JSON summary.
    """
    name = "csv"
    SUMMARY_NAME = "summary.json"

    def __init__(self, directory: Union[str, pathlib.Path]):
        self.directory = pathlib.Path(directory)

    def write(self, report: "RunReport") -> List[pathlib.Path]:
        self.directory.mkdir(parents=True, exist_ok=True)
        written = []
        for name, df in report.tables.items():
            path = self.directory / f"{name}.csv"
            _rounded(df).to_csv(
                path, index=False, float_format=f"%.{PRECISION}f", lineterminator="\n", na_rep=""
            )
            written.append(path)

        path = self.directory / self.SUMMARY_NAME
        path.write_text(report.as_json() + "\n", encoding="utf-8")
        written.append(path)
        return written


class MarkupWriter(ReportWriter):
    """
    Base class for report writers that use a markup language.
    """
    # Table format used when generating tables.
    _tablefmt = None

    def __init__(self, stream):
        self._stream = stream

    def table(self, tabular_data: Union[List[dict], List[list]], headers=None, **options):
        """
        Writes out tabular data as a table using tabulate library.

        :param tabular_data: A list of dicts or lists to represent tabular data.
        :param headers: Header option passed to tabulate. If not provided and tabular data
            contains dictionaries, it will use the keys.
        :param **options: Extra arguments to pass along to tabulate.
        """
        if tabular_data and not headers and isinstance(tabular_data[0], dict):
            headers = "keys"
        self._stream.write(tabulate.tabulate(
            tabular_data, headers=headers or (), tablefmt=self._tablefmt, floatfmt=f".{PRECISION}f", **options
        ))
        self._stream.write("\n\n")

    def dataframe(self, df: pandas.DataFrame):
        headers = [_title(column) for column in df.columns]
        rows = _rounded(df).astype(object).where(df.notna(), "").values.tolist()
        self.table(rows, headers=headers)

    def write(self, report: "RunReport"):
        """
        Writes the report's tables followed by the equilibrium and the captured logs.
        """
        self.h1(f"Scenario: {report.config.name}")
        for name, df in report.tables.items():
            self.h2(_title(name))
            self.dataframe(df)

        equilibrium = report.equilibrium
        if equilibrium:
            self.h2("Equilibrium")
            self.table([
                {
                    "Player": result.decision.player,
                    "Path": result.decision.path,
                    "Type": result.decision.ftr_type,
                    "Bid": result.decision.price,
                    "Request": result.decision.quantity,
                    "Award": result.decision.award,
                    "Profit": result.profit,
                }
                for result in equilibrium.results
            ])
            summary = [
                ["Status", equilibrium.status],
                ["Rounds", equilibrium.rounds],
                ["Objective", equilibrium.objective],
            ]
            if equilibrium.nash:
                summary.append(["Largest deviation gain", equilibrium.nash.max_improvement])
                summary.append(["Certified", equilibrium.nash.certified])
            if report.joint:
                summary.append(["Joint objective", report.joint.objective])
                summary.append(["Joint agrees", report.joint_agrees])
            self.table(summary, headers=["Field", "Value"])

        if report.errors:
            self.h2("Errors")
            self.code_block("\n".join(report.errors))
        if report.logs:
            self.h2("Logs")
            self.code_block("\n".join(report.logs))

    @abc.abstractmethod
    def h1(self, text: str):
        ...

    @abc.abstractmethod
    def h2(self, text: str):
        ...

    @abc.abstractmethod
    def code_block(self, text: str):
        ...


class MarkdownWriter(MarkupWriter):
    name = "markdown"
    _tablefmt = "pipe"

    def h1(self, text: str):
        self._stream.write(f"# {text}\n")

    def h2(self, text: str):
        self._stream.write(f"## {text}\n")

    def code_block(self, text: str):
        if not text.endswith("\n"):
            text = text + "\n"
        self._stream.write(f"```\n{text}```\n\n")


class SimpleTextWriter(MarkupWriter):
    name = "simple"
    _tablefmt = "simple"

    def h1(self, text: str):
        self._stream.write(f"----- {text} -----\n")

    def h2(self, text: str):
        self._stream.write(f"---- {text} ----\n")

    def code_block(self, text: str):
        if not text.endswith("\n"):
            text = text + "\n"
        self._stream.write(text + "\n")


WRITERS: Dict[str, type] = {
    MarkdownWriter.name: MarkdownWriter,
    SimpleTextWriter.name: SimpleTextWriter,
}
