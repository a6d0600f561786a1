import pytest

from qlogprov.analysis import (
    OUTPUT_SCHEMA,
    BindingMode,
    ColumnRef,
    Confidence,
    RelationRef,
    analyze_statement,
    apply_ddl,
    prepare_statement,
    procedure_name,
    statement_kind,
)
from qlogprov.catalog import CatalogState
from qlogprov.generator import INSERT_V1, INSERT_V2, sales_catalog

S = RelationRef("dbo", "StagedSales", "table")
H = RelationRef("dbo", "SalesHistory", "table")
R = RelationRef("dbo", "ConversionRate", "table")


@pytest.fixture(scope="module")
def cat():
    return sales_catalog()


def names(rels):
    return {r.name for r in rels}


def test_v1_insert_column_lineage(cat):
    p = analyze_statement(INSERT_V1, cat)
    assert p.confidence is Confidence.EXACT
    assert p.inputs == {S, R} and p.outputs == {H}
    assert p.column_map[ColumnRef(H, "Amount")] == {ColumnRef(R, "Rate"), ColumnRef(S, "Amount")}
    assert p.column_map[ColumnRef(H, "Region")] == {ColumnRef(S, "Region")}


def test_star_insert_maps_positionally(cat):
    p = analyze_statement(INSERT_V2, cat)
    assert p.inputs == {S} and p.outputs == {H}
    assert {k.column: {c.column for c in v} for k, v in p.column_map.items()} == {
        "CustomerId": {"CustomerId"},
        "Region": {"Region"},
        "Amount": {"Amount"},
    }


def test_guarded_delete_from_table(cat):
    text = "IF EXISTS(SELECT * FROM INFORMATION_SCHEMA.TABLES WHERE TABLE_NAME='StagedSales') DELETE FROM TABLE StagedSales"
    p = analyze_statement(text, cat)
    assert p.outputs == {S} and p.inputs == frozenset()


def test_bulk_insert_reads_external_file(cat):
    p = analyze_statement("BULK INSERT StagedSales FROM 'newSales.csv'", cat)
    assert p.inputs == {RelationRef("", "newSales.csv", "external")} and p.outputs == {S}


def test_update_self_reference_is_input_and_output(cat):
    p = analyze_statement("UPDATE SalesHistory SET Amount = Amount * 2 WHERE Region = 'EU'", cat)
    assert p.inputs == {H} and p.outputs == {H}
    assert p.column_map == {ColumnRef(H, "Amount"): {ColumnRef(H, "Amount")}}


def test_update_from_join(cat):
    p = analyze_statement(
        "UPDATE h SET Amount = r.Rate FROM SalesHistory h JOIN ConversionRate r ON h.Region = r.Region", cat
    )
    assert names(p.inputs) == {"SalesHistory", "ConversionRate"} and p.outputs == {H}
    assert p.column_map[ColumnRef(H, "Amount")] == {ColumnRef(R, "Rate")}


def test_delete_with_join_reads_both(cat):
    p = analyze_statement("DELETE h FROM SalesHistory h JOIN StagedSales s ON h.CustomerId = s.CustomerId", cat)
    assert names(p.inputs) == {"SalesHistory", "StagedSales"} and p.outputs == {H}


def test_delete_with_subquery_reads_subquery_relation(cat):
    p = analyze_statement("DELETE FROM SalesHistory WHERE CustomerId IN (SELECT CustomerId FROM StagedSales)", cat)
    assert S in p.inputs and p.outputs == {H}


def test_merge(cat):
    p = analyze_statement(
        "MERGE SalesHistory AS t USING StagedSales AS s ON t.CustomerId = s.CustomerId "
        "WHEN MATCHED THEN UPDATE SET t.Amount = s.Amount "
        "WHEN NOT MATCHED THEN INSERT (CustomerId, Region, Amount) VALUES (s.CustomerId, s.Region, s.Amount);",
        cat,
    )
    assert S in p.inputs and p.outputs == {H}
    assert ColumnRef(S, "Amount") in p.column_map[ColumnRef(H, "Amount")]


def test_select_goes_to_query_output(cat):
    p = analyze_statement("SELECT Region, SUM(Amount) AS total FROM SalesHistory GROUP BY Region", cat)
    [out] = p.outputs
    assert out.schema == OUTPUT_SCHEMA and out.kind == "output"
    assert p.column_map[ColumnRef(out, "total")] == {ColumnRef(H, "Amount")}


def test_cte_and_subquery_resolve_to_base_tables(cat):
    p = analyze_statement(
        "WITH x AS (SELECT CustomerId, Amount FROM StagedSales) "
        "INSERT INTO SalesHistory (CustomerId, Amount) SELECT CustomerId, Amount FROM x",
        cat,
    )
    assert p.inputs == {S} and p.outputs == {H}
    assert p.column_map[ColumnRef(H, "Amount")] == {ColumnRef(S, "Amount")}


def test_control_columns_only_on_request(cat):
    text = "INSERT INTO SalesHistory (CustomerId) SELECT CustomerId FROM StagedSales WHERE Amount > 5"
    plain = analyze_statement(text, cat)
    ctl = analyze_statement(text, cat, include_control_columns=True)
    assert plain.column_map[ColumnRef(H, "CustomerId")] == {ColumnRef(S, "CustomerId")}
    assert ColumnRef(S, "Amount") in ctl.column_map[ColumnRef(H, "CustomerId")]


def test_view_expansion_reaches_base_table():
    state = apply_ddl(CatalogState.from_tables({"T": ["a", "b"]}), "CREATE VIEW V AS SELECT a AS x FROM T")
    p = analyze_statement("INSERT INTO T (b) SELECT x FROM V", state)
    # The view stays visible as an input next to the table it reads.
    assert names(p.inputs) == {"T", "V"}
    assert {c.column for c in p.column_map[ColumnRef(RelationRef("dbo", "T", "table"), "b")]} == {"a"}


@pytest.mark.parametrize("text", ["SET @a=2", "DECLARE @x int", "BEGIN TRANSACTION", "PRINT 'hi'"])
def test_statements_without_datasets(text):
    p = analyze_statement(text, CatalogState())
    assert p.is_empty


def test_unparseable_text_is_suggested_and_empty():
    p = analyze_statement("SELEKT frobnicate ((", CatalogState())
    assert p.is_empty and p.confidence is Confidence.SUGGESTED
    assert any("unsupported syntax" in d for d in p.diagnostics)


def test_best_effort_star_without_schema():
    p = analyze_statement("INSERT INTO A SELECT * FROM B", CatalogState(), BindingMode.BEST_EFFORT)
    assert names(p.inputs) == {"B"} and names(p.outputs) == {"A"}
    assert p.column_map == {} and p.confidence is Confidence.SUGGESTED


def test_pre_bound_bindings_supply_schema():
    p = analyze_statement(
        "INSERT INTO A SELECT * FROM B",
        None,
        BindingMode.PRE_BOUND,
        bindings={"A": ["x", "y"], "B": ["p", "q"]},
    )
    a, b = RelationRef("dbo", "A", "table"), RelationRef("dbo", "B", "table")
    assert p.column_map == {ColumnRef(a, "x"): {ColumnRef(b, "p")}, ColumnRef(a, "y"): {ColumnRef(b, "q")}}
    assert p.confidence is Confidence.EXACT


def test_ambiguous_unknown_column_is_suggested_against_all_candidates():
    p = analyze_statement("INSERT INTO A (z) SELECT v FROM B JOIN C ON B.id = C.id", CatalogState())
    src = {c.relation.name for c in p.column_map[ColumnRef(RelationRef("dbo", "A", "table"), "z")]}
    assert src == {"B", "C"} and p.confidence is Confidence.SUGGESTED


def test_ddl_replay_generations():
    s = CatalogState()
    s = apply_ddl(s, "CREATE TABLE T (a int)")
    assert s.lookup("dbo", "T").generation == 1
    s = apply_ddl(s, "DROP TABLE T")
    assert s.lookup("dbo", "T") is None
    s = apply_ddl(s, "CREATE TABLE T (a int, b int)")
    obj = s.lookup("dbo", "T")
    assert obj.generation == 2 and obj.column_names == ["a", "b"]
    s = apply_ddl(s, "ALTER TABLE T ADD c int")
    assert s.lookup("dbo", "T").column_names == ["a", "b", "c"]
    s = apply_ddl(s, "SELECT a INTO #tmp FROM T")
    assert s.lookup(None, "#tmp").column_names == ["a"]


def test_ddl_replay_is_pure():
    s = CatalogState.from_tables({"T": ["a"]})
    apply_ddl(s, "DROP TABLE T")
    assert s.lookup("dbo", "T") is not None


@pytest.mark.parametrize(
    "text, kind",
    [
        ("SELECT 1", "select"),
        ("INSERT INTO t VALUES (1)", "insert"),
        ("  update t set a = 1", "update"),
        ("EXEC dbo.p 1", "exec"),
        ("BULK INSERT t FROM 'f'", "bulk_insert"),
        ("CREATE TABLE t (a int)", "ddl"),
        ("SET @x = 1", "set"),
        ("WHILE @i < 3", "control"),
    ],
)
def test_statement_kind(text, kind):
    assert statement_kind(text) == kind


def test_procedure_name_and_prepare():
    assert procedure_name("EXECUTE CleanAndAppendSalesHistory @v") == ("dbo", "CleanAndAppendSalesHistory")
    assert procedure_name("EXEC sales.p") == ("sales", "p")
    assert procedure_name("SELECT 1") is None
    assert prepare_statement("IF @x = 1 DELETE FROM TABLE T").strip() == "DELETE FROM T"
