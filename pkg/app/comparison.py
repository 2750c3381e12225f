"""Train every temporal head under one recipe and tabulate Rank-1/Rank-5 by condition."""

import logging
import os

from tkan.errors import ContractError
from tkan.model import HEAD_TYPES, GaitModel, shared_initialisation_matches

from .config import with_head
from .evaluator import comparison_table, evaluate, pixel_mean_report
from .trainer import class_labels, train

logger = logging.getLogger(__name__)

TABLE_NAME = "comparison.tsv"


def assert_shared_initialisation(config, records, heads=HEAD_TYPES):
    subjects, _ = class_labels(records)
    models = [GaitModel(with_head(config, head), len(subjects)) for head in heads]
    if not shared_initialisation_matches(models):
        raise ContractError("heads do not share the encoder and feature-norm initialisation")
    return models


def compare_heads(config, dataset, output_dir, heads=HEAD_TYPES, protocol=None):
    """Returns ``(reports, table_text)``; reports are keyed by head name plus ``pixel-mean``."""
    assert_shared_initialisation(config, dataset.train, heads)
    reports = {}
    for head in heads:
        head_config = with_head(config, head)
        head_dir = os.path.join(output_dir, head)
        result = train(head_config, dataset.train, head_dir, test_records=dataset.test, protocol=protocol)
        report = evaluate(result.model, dataset.test, protocol, config=head_config, curves=result.curves)
        report.write(os.path.join(head_dir, "report.txt"))
        reports[head] = report
    reports["pixel-mean"] = pixel_mean_report(dataset.test, protocol)
    table = comparison_table(reports)
    with open(os.path.join(output_dir, TABLE_NAME), "w", encoding="utf-8") as handle:
        handle.write(table)
    if "tkan" in reports:
        cl_scores = {head: report.conditions["CL"].rank1 for head, report in reports.items() if "CL" in report.conditions}
        if cl_scores and cl_scores.get("tkan", 0.0) < max(cl_scores.values()):
            logger.info("TKAN is not the best head on CL probes: %s", cl_scores)
    logger.info("comparison table:\n%s", table)
    return reports, table
