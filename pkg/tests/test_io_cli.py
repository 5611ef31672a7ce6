import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drbart.cli import EXIT_INPUT, EXIT_OK, EXIT_USAGE, main
from drbart.draws import AffineMap, DrawRecord, PosteriorDraws
from drbart.io import (
    SCHEMA_VERSION,
    DrawFileError,
    DrawWriter,
    InputError,
    chain_path,
    decode_ensemble,
    encode_ensemble,
    load_csv,
    load_draws,
    save_draws,
    standardize,
)
from drbart.predict import density_grid
from drbart.priors import BartHyperParams, sample_prior_tree
from drbart.tree_core import Ensemble

BUSHY = BartHyperParams(alpha=0.95, beta=0.7)


def write(path, text):
    path.write_text(text)
    return path


def test_three_row_file(tmp_path):
    data = load_csv(write(tmp_path / 'd.csv', 'x,y\n1,0\n2,1\n3,2\n'), 'y')
    np.testing.assert_allclose(data.y, [-0.5, 0.0, 0.5])
    np.testing.assert_allclose(data.x[:, 0], [0.0, 0.5, 1.0])
    assert data.columns == ['x'] and data.response == 'y'


def test_constant_response(tmp_path):
    with pytest.raises(InputError, match='zero response range'):
        load_csv(write(tmp_path / 'd.csv', 'x,y\n1,3\n2,3\n'), 'y')


@pytest.mark.parametrize(
    'text, match',
    [
        ('x,z\n1,2\n', "missing column"),
        ('x,y\n1,2\n2,abc\n', "row 2, column 'y'"),
        ('x,y\n1,2\nnan,3\n', "row 2, column 'x'"),
        ('x,y\n1,2\n3\n', 'row 2'),
        ('', 'empty'),
        ('x,y\n', 'no data rows'),
    ],
)
def test_bad_csv(tmp_path, text, match):
    with pytest.raises(InputError, match=match):
        load_csv(write(tmp_path / 'd.csv', text), 'y')


def test_missing_file(tmp_path):
    with pytest.raises(InputError):
        load_csv(tmp_path / 'nope.csv', 'y')


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_standardize_round_trip(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 50))
    x = rng.normal(rng.normal(0, 1e3), rng.uniform(1e-3, 1e3), (n, 3))
    y = rng.normal(rng.normal(0, 1e3), rng.uniform(1e-3, 1e3), n)
    data = standardize(x, y)
    assert data.y.min() == pytest.approx(-0.5) and data.y.max() == pytest.approx(0.5)
    assert np.all((data.x >= 0) & (data.x <= 1 + 1e-15))
    np.testing.assert_allclose(data.y_map.to_raw(data.y), y, rtol=1e-12, atol=1e-12 * np.abs(y).max())
    for j, m in enumerate(data.x_maps):
        np.testing.assert_allclose(m.to_raw(data.x[:, j]), x[:, j], rtol=1e-12, atol=1e-12 * np.abs(x[:, j]).max())


def random_records(rng, k, n_axes=2, latents=False):
    out = []
    for i in range(k):
        mean = Ensemble.from_trees(
            [sample_prior_tree(rng, BUSHY, n_axes, leaf_sampler=lambda r: r.normal()) for _ in range(4)]
        )
        var = Ensemble.from_trees(
            [sample_prior_tree(rng, BUSHY, n_axes, leaf_sampler=lambda r: r.normal()) for _ in range(2)],
            kind='variance',
        )
        out.append(DrawRecord(i, mean, var, float(rng.uniform(0.01, 1)), rng.random(7) if latents else None))
    return out


def random_draws(rng, k=5, latents=False):
    return PosteriorDraws(
        random_records(rng, k, latents=latents),
        y_map=AffineMap(3.0, 7.0),
        x_maps=[AffineMap(-1.0, 2.0)],
        meta={'seed': 1, 'variant': 'FULL'},
        columns=['x'],
    )


def test_ensemble_encoding_round_trip(rng):
    for rec in random_records(rng, 10):
        assert decode_ensemble(encode_ensemble(rec.mean), 'mean') == rec.mean
    empty = Ensemble.from_trees([], kind='variance')
    assert decode_ensemble(encode_ensemble(empty), 'variance').n_trees == 0


def test_bad_ensemble_encoding():
    with pytest.raises(DrawFileError):
        decode_ensemble({'sizes': [3], 'axis': [0, -1], 'params': [0.5, 1.0]}, 'mean')
    with pytest.raises(DrawFileError):
        decode_ensemble({'sizes': [2], 'axis': [0, -1], 'params': [0.5, 1.0]}, 'mean')


@pytest.mark.parametrize('latents', [False, True])
def test_draw_file_round_trip(tmp_path, rng, latents):
    draws = random_draws(rng, latents=latents)
    path = tmp_path / 'd.jsonl'
    save_draws(draws, path)
    back = load_draws(path)
    assert len(back) == len(draws)
    assert all(a == b for a, b in zip(draws, back))
    assert back.y_map == draws.y_map and back.x_maps == draws.x_maps
    assert back.meta == draws.meta and back.columns == ['x']
    grid = np.linspace(-5, 10, 200)
    before = density_grid(draws, [0.3], grid).values
    after = density_grid(back, [0.3], grid).values
    assert np.array_equal(before, after)


def test_empty_draw_file(tmp_path):
    path = tmp_path / 'e.jsonl'
    save_draws(PosteriorDraws(), path)
    lines = path.read_text().splitlines()
    assert json.loads(lines[0])['schema_version'] == SCHEMA_VERSION
    assert json.loads(lines[1]) == {'end': True, 'n_draws': 0}
    assert len(load_draws(path)) == 0


def test_version_mismatch(tmp_path, rng):
    path = tmp_path / 'd.jsonl'
    save_draws(random_draws(rng, 2), path)
    lines = path.read_text().split('\n')
    header = json.loads(lines[0])
    header['schema_version'] = SCHEMA_VERSION + 1
    lines[0] = json.dumps(header)
    path.write_text('\n'.join(lines))
    with pytest.raises(DrawFileError, match='schema version'):
        load_draws(path)


def test_truncated_files(tmp_path, rng):
    path = tmp_path / 'd.jsonl'
    save_draws(random_draws(rng, 3), path)
    text = path.read_text()
    lines = text.split('\n')
    # cut in the middle of the last record
    cut = '\n'.join(lines[:3]) + '\n' + lines[3][: len(lines[3]) // 2]
    write(path, cut)
    with pytest.raises(DrawFileError, match='truncated'):
        load_draws(path)
    assert len(load_draws(path, allow_incomplete=True)) == 2
    # complete lines but no end marker: a run still being written
    write(path, '\n'.join(lines[:4]) + '\n')
    with pytest.raises(DrawFileError, match='end marker'):
        load_draws(path)
    assert len(load_draws(path, allow_incomplete=True)) == 3
    write(path, '')
    with pytest.raises(DrawFileError):
        load_draws(path)
    write(path, '{"format": "other"}\n')
    with pytest.raises(DrawFileError):
        load_draws(path)


def test_writer_streams_complete_lines(tmp_path, rng):
    path = tmp_path / 'd.jsonl'
    recs = random_records(rng, 2)
    with DrawWriter(path, y_map=AffineMap(), x_maps=[AffineMap()], meta={}) as w:
        w.write(recs[0])
        partial = load_draws(path, allow_incomplete=True)
        assert len(partial) == 1 and partial[0] == recs[0]
        w.write(recs[1])
    assert len(load_draws(path)) == 2


def test_chain_path():
    assert chain_path('out/draws.jsonl', 1, 3).name == 'draws.chain1.jsonl'
    assert chain_path('draws.jsonl', 0, 1).name == 'draws.jsonl'


# ---------------------------------------------------------------------------
# command line


def run_cli(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope='module')
def sim_data(tmp_path_factory):
    d = tmp_path_factory.mktemp('sim')
    assert main(['simulate', '--dgp', 'base', '--n', '80', '--seed', '1', '--out', str(d / 'data.csv')]) == 0
    return d


SMALL_FIT = ['--m', '8', '--mv', '4', '--iters', '6', '--burn', '4']


def test_simulate_outputs(sim_data):
    rows = (sim_data / 'data.csv').read_text().splitlines()
    assert rows[0] == 'x,y' and len(rows) == 81
    truth = (sim_data / 'data_truth.csv').read_text().splitlines()
    assert truth[0] == 'x,y,density'


def test_fit_is_deterministic(sim_data, capsys):
    for name in ('a.jsonl', 'b.jsonl'):
        code, _, _ = run_cli(capsys, 'fit', '--data', sim_data / 'data.csv', '--response', 'y',
                             '--seed', 3, '--out', sim_data / name, *SMALL_FIT)
        assert code == EXIT_OK
    assert (sim_data / 'a.jsonl').read_bytes() == (sim_data / 'b.jsonl').read_bytes()
    assert len(load_draws(sim_data / 'a.jsonl')) == 6


def test_fit_query_evaluate_pipeline(sim_data, capsys):
    draws = sim_data / 'p.jsonl'
    code, _, _ = run_cli(capsys, 'fit', '--data', sim_data / 'data.csv', '--response', 'y', '--variant', 'lh',
                         '--latent', 'slice', '--out', draws, *SMALL_FIT)
    assert code == EXIT_OK

    code, out, _ = run_cli(capsys, 'density', '--draws', draws, '--x', '0.8', '--grid-n', 50)
    assert code == EXIT_OK
    lines = out.splitlines()
    assert lines[0] == 'y,mean,lower,upper' and len(lines) == 51
    vals = np.array([[float(v) for v in ln.split(',')] for ln in lines[1:]])
    assert np.all(vals[:, 2] <= vals[:, 1]) and np.all(vals[:, 1] <= vals[:, 3])

    code, out, _ = run_cli(capsys, 'quantile', '--draws', draws, '--x', '0.5', '--s', '0.1..0.9:0.2')
    assert code == EXIT_OK
    q = np.array([[float(v) for v in ln.split(',')] for ln in out.splitlines()[1:]])
    np.testing.assert_allclose(q[:, 0], [0.1, 0.3, 0.5, 0.7, 0.9])
    assert np.all(np.diff(q[:, 1]) > 0)

    out_csv = sim_data / 'eval.csv'
    code, _, _ = run_cli(capsys, 'evaluate', '--draws', draws, '--truth-spec', 'base', '--test-n', 50,
                         '--max-draws', 3, '--grid-n', 256, '--out', out_csv)
    assert code == EXIT_OK
    rows = [ln.split(',') for ln in out_csv.read_text().splitlines()]
    assert rows[0] == ['metric', 'x', 'value']
    assert [r[0] for r in rows[1:]].count('w1') == 3
    cov = float(rows[-1][2])
    assert rows[-1][0] == 'predictive_coverage' and 0 <= cov <= 1


def test_variant_l_and_chains(sim_data, capsys):
    out = sim_data / 'l.jsonl'
    code, _, _ = run_cli(capsys, 'fit', '--data', sim_data / 'data.csv', '--response', 'y', '--variant', 'l',
                         '--nu0', 4, '--xi0', 0.5, '--chains', 2, '--out', out, *SMALL_FIT)
    assert code == EXIT_OK
    d0, d1 = load_draws(chain_path(out, 0, 2)), load_draws(chain_path(out, 1, 2))
    assert len(d0) == len(d1) == 6
    assert d0[0] != d1[0]
    assert all(rec.var.n_trees == 0 for rec in d0)
    assert d0.meta['config']['s0']['nu0'] == 4.0


@pytest.mark.parametrize(
    'argv',
    [
        [],
        ['fit', '--bogus'],
        ['fit', '--data', 'x.csv', '--response', 'y', '--out', 'o', '--variant', 'full', '--nu0', '3'],
        ['fit', '--data', 'x.csv', '--response', 'y', '--out', 'o', '--variant', 'weird'],
        ['simulate', '--dgp', 'quadratic', '--out', 'o.csv'],
        ['simulate', '--dgp', 'base', '--a', '2', '--out', 'o.csv'],
        ['quantile', '--draws', 'd', '--x', '0.5', '--s', '0..1'],
    ],
)
def test_usage_errors(tmp_path, capsys, argv, monkeypatch):
    monkeypatch.chdir(tmp_path)
    write(tmp_path / 'x.csv', 'x,y\n1,2\n2,3\n')
    code, _, err = run_cli(capsys, *argv)
    assert code == EXIT_USAGE
    assert err.count('\n') == 1 and err.startswith('drbart: error: ')


def test_input_errors(sim_data, tmp_path, capsys):
    code, _, err = run_cli(capsys, 'fit', '--data', tmp_path / 'none.csv', '--response', 'y', '--out', tmp_path / 'o')
    assert code == EXIT_INPUT and err.count('\n') == 1
    code, _, err = run_cli(capsys, 'fit', '--data', sim_data / 'data.csv', '--response', 'q', '--out', tmp_path / 'o')
    assert code == EXIT_INPUT and 'missing column' in err
    bad = write(tmp_path / 'bad.jsonl', '{"format": "drbart-draws", "schema_version": 99}\n')
    code, _, err = run_cli(capsys, 'density', '--draws', bad, '--x', '0.5')
    assert code == EXIT_INPUT and 'schema version' in err


def test_query_needs_matching_covariates(sim_data, capsys):
    draws = sim_data / 'a.jsonl'
    if not draws.exists():
        main(['fit', '--data', str(sim_data / 'data.csv'), '--response', 'y', '--out', str(draws), *SMALL_FIT])
    code, _, err = run_cli(capsys, 'density', '--draws', draws, '--x', '0.1,0.2')
    assert code == EXIT_USAGE and '--x needs 1' in err


def test_prior_check_command(capsys):
    code, out, _ = run_cli(capsys, 'prior-check', '--n-trees', 2000, '--n-scale', 100000, '--seed', 1)
    lines = out.splitlines()
    assert len(lines) == 7
    assert all(ln.startswith(('PASS ', 'FAIL ')) for ln in lines)
    assert code in (0, 4)
