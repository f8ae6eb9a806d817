import numpy as np
import pytest
from helpers import (
    assemble_fe_matrix,
    backward_substitution,
    boolean_elimination_fill,
    csr_from_dense,
    forward_substitution,
    graph_from_edges,
    grid_graph,
    laplacian_matrix,
    random_spd,
)

from tetsim.krylov import SolverConfig, pcg, spmv
from tetsim.mesh import generate_beam, vertex_adjacency
from tetsim.ndprecond import (
    AsyncPreconditioner,
    IndefiniteMatrixError,
    LifecycleError,
    PrecondStatus,
    apply,
    count_coupling_violations,
    expand_plan,
    graph_from_pattern,
    ldlt_factor,
    nested_dissection,
    solve_lower,
    solve_upper,
)


def beam_factors(params, dims=(3, 3, 6), leaf=8, dt=0.01):
    mesh = generate_beam(*dims, 0.1).with_fixed_nodes(
        np.flatnonzero(generate_beam(*dims, 0.1).nodes[:, 2] == 0.0)
    )
    a, _ = assemble_fe_matrix(mesh, params, dt=dt)
    plan = expand_plan(nested_dissection(vertex_adjacency(mesh), leaf))
    return a, plan, ldlt_factor(a, plan)


class TestNestedDissection:
    def test_path_graph(self):
        g = graph_from_edges(3, [(0, 1), (1, 2)])
        plan = nested_dissection(g, leaf_threshold=1)
        sep = [b for b in plan.blocks if b.kind == "separator"]
        assert len(sep) == 1
        assert plan.perm[sep[0].start: sep[0].stop].tolist() == [1]
        leaves = sorted(plan.perm[b.start: b.stop].tolist()[0] for b in plan.blocks if b.kind == "leaf")
        assert leaves == [0, 2]
        assert plan.perm.tolist() == [0, 2, 1]

    def test_k4_below_threshold(self):
        edges = [(a, b) for a in range(4) for b in range(a + 1, 4)]
        plan = nested_dissection(graph_from_edges(4, edges), leaf_threshold=4)
        assert len(plan.blocks) == 1
        assert plan.blocks[0].kind == "leaf"
        assert plan.perm.tolist() == [0, 1, 2, 3]

    def test_perm_is_bijection(self):
        plan = nested_dissection(grid_graph(12), leaf_threshold=6)
        assert sorted(plan.perm.tolist()) == list(range(144))
        assert np.array_equal(plan.perm[plan.iperm], np.arange(144))

    def test_grid_separator_sizes(self):
        k = 16
        plan = nested_dissection(grid_graph(k), leaf_threshold=8)
        for blk in plan.blocks:
            if blk.kind == "separator":
                assert blk.size <= 2 * k

    def test_grid_independence_on_pattern(self):
        g = grid_graph(16)
        plan = nested_dissection(g, leaf_threshold=8)
        assert count_coupling_violations(laplacian_matrix(g), plan) == 0

    def test_separator_touches_both_halves(self):
        g = grid_graph(10)
        plan = nested_dissection(g, leaf_threshold=5)
        owner = plan.block_of_index()
        for bid, blk in enumerate(plan.blocks):
            if blk.kind != "separator" or not blk.children:
                continue
            child_sides = []
            for cid in blk.children:
                c = plan.blocks[cid]
                child_sides.append(set(plan.perm[c.tree_start: c.stop].tolist()))
            sep_nodes = plan.perm[blk.start: blk.stop]
            touched = [False] * len(child_sides)
            for v in sep_nodes:
                for w in g.neighbors(int(v)):
                    for side_idx, side in enumerate(child_sides):
                        if int(w) in side:
                            touched[side_idx] = True
            assert all(touched)

    def test_empty_graph(self):
        g = graph_from_edges(0, [])
        plan = nested_dissection(g, leaf_threshold=4)
        assert plan.n == 0
        assert len(plan.blocks) == 0

    def test_disconnected_components(self):
        g = graph_from_edges(6, [(0, 1), (1, 2), (3, 4), (4, 5)])
        plan = nested_dissection(g, leaf_threshold=2)
        assert sorted(plan.perm.tolist()) == list(range(6))
        assert count_coupling_violations(laplacian_matrix(g), plan) == 0

    def test_deterministic(self):
        g = grid_graph(9)
        p1 = nested_dissection(g, leaf_threshold=4)
        p2 = nested_dissection(g, leaf_threshold=4)
        assert np.array_equal(p1.perm, p2.perm)
        assert p1.levels == p2.levels

    def test_expand_plan(self):
        g = graph_from_edges(3, [(0, 1), (1, 2)])
        plan = expand_plan(nested_dissection(g, leaf_threshold=1), 3)
        assert plan.n == 9
        assert plan.perm.tolist() == [0, 1, 2, 6, 7, 8, 3, 4, 5]
        assert np.array_equal(plan.perm[plan.iperm], np.arange(9))


class TestLdltFactor:
    def test_diagonal_matrix(self):
        a = csr_from_dense(np.diag([4.0, 9.0]))
        plan = nested_dissection(graph_from_pattern(a), leaf_threshold=4)
        f = ldlt_factor(a, plan)
        assert f.l_matrix.nnz == 0
        assert np.allclose(np.sort(f.d), [4.0, 9.0])

    def test_hand_elimination_2x2(self):
        a = csr_from_dense(np.array([[4.0, 2.0], [2.0, 3.0]]))
        plan = nested_dissection(graph_from_pattern(a), leaf_threshold=4)
        f = ldlt_factor(a, plan)
        assert f.d == pytest.approx([4.0, 2.0], rel=1e-15)
        dense_l = f.l_matrix.to_dense()
        assert dense_l[1, 0] == pytest.approx(0.5, rel=1e-15)

    def test_beam_reconstruction(self, params):
        a, plan, f = beam_factors(params)
        n = a.nrows
        ld = f.l_matrix.to_dense() + np.eye(n)
        recon = ld @ np.diag(f.d) @ ld.T
        perm_a = a.to_dense()[np.ix_(plan.perm, plan.perm)]
        rel = np.linalg.norm(recon - perm_a) / np.linalg.norm(perm_a)
        assert rel < 1e-10

    def test_fill_not_worse_than_natural_order(self, params):
        mesh = generate_beam(4, 4, 8, 0.1)
        a, _ = assemble_fe_matrix(mesh, params)
        plan = expand_plan(nested_dissection(vertex_adjacency(mesh), 8))
        f = ldlt_factor(a, plan)
        pattern = a.to_dense() != 0.0
        natural = boolean_elimination_fill(pattern, np.arange(a.nrows))
        assert f.fill_in <= natural

    def test_indefinite_rejected(self):
        a = csr_from_dense(np.array([[1.0, 2.0], [2.0, 1.0]]))  # eigenvalues 3, -1
        plan = nested_dissection(graph_from_pattern(a), leaf_threshold=4)
        with pytest.raises(IndefiniteMatrixError):
            ldlt_factor(a, plan)

    def test_symbolic_reuse_same_values(self, params):
        a, plan, f1 = beam_factors(params)
        shifted = a.copy_values()
        shifted.values *= 2.0
        f2 = ldlt_factor(shifted, plan, symbolic=f1.symbolic)
        assert np.allclose(2.0 * f1.d, f2.d)
        assert np.array_equal(f1.l_matrix.col_ind, f2.l_matrix.col_ind)


class TestTriangularSolves:
    def test_identity_factors(self, rng):
        a = csr_from_dense(np.eye(7))
        plan = nested_dissection(graph_from_pattern(a), leaf_threshold=3)
        f = ldlt_factor(a, plan)
        r = rng.standard_normal(7)
        assert np.allclose(solve_lower(f, r), r)
        assert np.allclose(solve_upper(f, r), r)

    def test_path_graph_matches_hand_substitution(self, rng):
        # Tridiagonal SPD matrix: the factor is bidiagonal, solvable by hand.
        n = 6
        dense = np.diag(np.full(n, 4.0)) + np.diag(np.full(n - 1, -1.0), 1) + np.diag(np.full(n - 1, -1.0), -1)
        a = csr_from_dense(dense)
        plan = nested_dissection(graph_from_pattern(a), leaf_threshold=n)
        f = ldlt_factor(a, plan)
        r = rng.standard_normal(n)
        y = solve_lower(f, r)
        y_hand = r.copy()
        l_dense = f.l_matrix.to_dense()
        for i in range(1, n):
            y_hand[i] -= l_dense[i, i - 1] * y_hand[i - 1]
        assert np.allclose(y, y_hand, atol=1e-14)
        z = solve_upper(f, y)
        z_hand = y.copy()
        for i in range(n - 2, -1, -1):
            z_hand[i] -= l_dense[i + 1, i] * z_hand[i + 1]
        assert np.allclose(z, z_hand, atol=1e-14)

    @pytest.mark.parametrize("workers", [1, 2, 4, 8])
    def test_beam_solves_match_sequential_oracle(self, rng, params, workers):
        a, plan, f = beam_factors(params, dims=(3, 3, 8))
        r = rng.standard_normal(a.nrows)
        y = solve_lower(f, r, workers=workers)
        y_oracle = forward_substitution(f.l_matrix, r)
        assert np.abs(y - y_oracle).max() <= 1e-12 * np.abs(y_oracle).max()
        z = solve_upper(f, y, workers=workers)
        z_oracle = backward_substitution(f.l_matrix, y)
        assert np.abs(z - z_oracle).max() <= 1e-12 * np.abs(z_oracle).max()

    def test_worker_counts_agree_exactly(self, rng, params):
        a, plan, f = beam_factors(params)
        r = rng.standard_normal(a.nrows)
        base_low = solve_lower(f, r, workers=1)
        base_up = solve_upper(f, r, workers=1)
        for w in (2, 4, 8):
            assert np.array_equal(solve_lower(f, r, workers=w), base_low)
            assert np.array_equal(solve_upper(f, r, workers=w), base_up)

    def test_tile_width_variations(self, rng, params):
        a, plan, _ = beam_factors(params)
        r = rng.standard_normal(a.nrows)
        results = []
        for tile in (4, 16, 64):
            f = ldlt_factor(a, plan, tile=tile)
            results.append(apply(f, r))
        for other in results[1:]:
            assert np.abs(other - results[0]).max() < 1e-10 * np.abs(results[0]).max()


class TestRandomizedPipeline:
    def test_random_patterns_thresholds_tiles_workers(self, rng):
        # Property sweep over random SPD patterns, leaf thresholds, tile
        # widths and worker counts: the plan must decouple siblings and
        # apply() must invert the factored matrix.
        for _ in range(25):
            n = int(rng.integers(2, 40))
            dense = random_spd(rng, n, shift=float(n))
            mask = rng.random((n, n)) < 0.65
            mask = mask & mask.T
            np.fill_diagonal(mask, False)
            dense[mask] = 0.0
            a = csr_from_dense(dense)
            plan = nested_dissection(graph_from_pattern(a), leaf_threshold=int(rng.integers(1, 8)))
            assert count_coupling_violations(a, plan) == 0
            f = ldlt_factor(a, plan, tile=int(rng.integers(1, 20)))
            r = rng.standard_normal(n)
            z = apply(f, r, workers=int(rng.integers(1, 5)))
            err = np.abs(spmv(a, z) - r).max() / np.abs(r).max()
            assert err < 1e-9

    def test_disconnected_graph_expanded_and_factored(self, rng):
        g = graph_from_edges(9, [(0, 1), (1, 2), (3, 4), (4, 5), (6, 7)])  # vertex 8 isolated
        plan = expand_plan(nested_dissection(g, leaf_threshold=1), 3)
        dense = np.eye(27) * 5.0
        for i, j in [(0, 1), (1, 2), (3, 4), (4, 5), (6, 7)]:
            for k in range(3):
                dense[3 * i + k, 3 * j + k] = dense[3 * j + k, 3 * i + k] = -1.0
        a = csr_from_dense(dense)
        f = ldlt_factor(a, plan)
        r = rng.standard_normal(27)
        z = f.apply(r, workers=4)
        assert np.abs(spmv(a, z) - r).max() < 1e-12


class TestApply:
    def test_exact_preconditioner_identity(self, rng, params):
        a, plan, f = beam_factors(params)
        r = rng.standard_normal(a.nrows)
        z = apply(f, r)
        assert np.abs(spmv(a, z) - r).max() <= 1e-9 * np.abs(r).max()

    def test_zero_input(self, params):
        a, plan, f = beam_factors(params)
        assert np.array_equal(apply(f, np.zeros(a.nrows)), np.zeros(a.nrows))

    def test_random_spd_matches_dense_solve(self, rng):
        dense = random_spd(rng, 30, shift=3.0)
        dense[np.abs(dense) < 0.8] = 0.0
        dense = 0.5 * (dense + dense.T) + 30 * np.eye(30)
        a = csr_from_dense(dense)
        plan = nested_dissection(graph_from_pattern(a), leaf_threshold=6)
        f = ldlt_factor(a, plan)
        r = rng.standard_normal(30)
        oracle = np.linalg.solve(dense[np.ix_(plan.perm, plan.perm)],
                                 r[plan.perm])[plan.iperm]
        assert np.abs(f.apply(r) - oracle).max() <= 1e-10 * np.abs(oracle).max()

    def test_positive_definite_action(self, rng, params):
        a, plan, f = beam_factors(params)
        for _ in range(5):
            r = rng.standard_normal(a.nrows)
            assert r @ f.apply(r) > 0.0


class TestStaleFactorsAsPreconditioner:
    def test_three_step_old_factors_converge_fast(self, params):
        # Deterministic replay of a deforming-beam window: factors of the
        # step-k system precondition the step-(k+3) solve.
        from tetsim.integrator import BackwardEulerIntegrator, IntegratorConfig, SimState
        from tetsim.krylov import cg
        from tetsim.models import make_model

        mesh = generate_beam(4, 4, 12, 0.1)
        mesh = mesh.with_fixed_nodes(np.flatnonzero(mesh.nodes[:, 2] == 0.0))
        model = make_model("corotational", mesh, params)
        integ = BackwardEulerIntegrator(
            mesh, model, IntegratorConfig(dt=0.005, gravity=(0.0, -9.81, 0.0))
        )
        state = SimState.rest(mesh)
        cfg = SolverConfig(tolerance=1e-9, max_iterations=5000)
        plan = expand_plan(nested_dissection(vertex_adjacency(mesh), 16))
        systems = []
        for _ in range(6):
            result = integ.step(state, lambda a, b: cg(a, b, cfg))
            systems.append((result.matrix, result.rhs))
        stale = ldlt_factor(systems[1][0], plan)

        class P:
            def apply(self, r):
                return stale.apply(r)

        a, b = systems[4]
        _, rep = pcg(a, b, P(), cfg)
        assert rep.converged
        assert rep.iterations <= 5


class TestAsyncLifecycle:
    def test_cold_start_transitions(self, params):
        a, plan, _ = beam_factors(params)
        pre = AsyncPreconditioner(plan)
        assert pre.status is PrecondStatus.EMPTY
        with pytest.raises(LifecycleError):
            pre.apply(np.zeros(a.nrows))
        pre.update(a, step=1)
        assert pre.status in (PrecondStatus.FACTORIZING, PrecondStatus.READY)
        pre.wait_ready()
        assert pre.status is PrecondStatus.READY
        assert pre.staleness(1) == 0
        pre.close()

    def test_constant_matrix_fast_convergence(self, rng, params):
        a, plan, _ = beam_factors(params)
        with AsyncPreconditioner(plan, policy="every-k", refactor_every=100) as pre:
            pre.update(a, step=1)
            pre.wait_ready()
            b = rng.standard_normal(a.nrows)

            class P:
                def apply(self, r):
                    return pre.apply(r)

            _, rep = pcg(a, b, P(), SolverConfig(tolerance=1e-9, max_iterations=50))
            assert rep.converged
            assert rep.iterations <= 2

    def test_failure_disables(self, params):
        bad = csr_from_dense(np.array([[1.0, 2.0], [2.0, 1.0]]))
        plan = nested_dissection(graph_from_pattern(bad), leaf_threshold=4)
        pre = AsyncPreconditioner(plan)
        pre.update(bad, step=1)
        with pytest.raises(LifecycleError):
            pre.wait_ready()
        assert pre.disabled
        assert pre.status is PrecondStatus.EMPTY
        pre.close()

    def test_every_k_policy(self, params):
        a, plan, _ = beam_factors(params)
        pre = AsyncPreconditioner(plan, policy="every-k", refactor_every=3)
        pre.update(a, step=1)
        pre.wait_ready()
        src0 = pre.factors.source_step
        pre.update(a, step=2)  # too early, no resubmission
        assert pre.refresh_in_flight is False
        pre.update(a, step=4)  # fires
        assert pre.refresh_in_flight is True
        pre.wait_ready()
        pre._publish_if_done()
        assert pre.factors.source_step == 4 or pre.factors.source_step == src0
        pre.close()

    def test_staleness_counts_steps(self, params):
        a, plan, _ = beam_factors(params)
        pre = AsyncPreconditioner(plan, policy="every-k", refactor_every=1000)
        pre.update(a, step=2)
        pre.wait_ready()
        assert pre.staleness(2) == 0
        assert pre.staleness(5) == 3
        pre.close()
