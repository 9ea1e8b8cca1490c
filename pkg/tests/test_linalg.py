import pytest
import torch

from errors import SvdConvergenceError
from spectral import linalg

DTYPE = torch.float64


class TestSvd:
    def test_reconstruction(self, generator):
        M = torch.randn(7, 4, generator=generator, dtype=DTYPE)
        U, S, V = linalg.svd(M)
        torch.testing.assert_close((U * S) @ V.T, M, atol=1e-12, rtol=0)
        assert torch.all(S[:-1] >= S[1:])

    def test_rejects_non_matrix(self):
        with pytest.raises(ValueError):
            linalg.svd(torch.ones(3, dtype=DTYPE))

    def test_rejects_non_finite(self):
        M = torch.eye(3, dtype=DTYPE)
        M[0, 1] = float("nan")
        with pytest.raises(ValueError, match="non-finite"):
            linalg.svd(M)

    def test_convergence_failure_is_typed(self, monkeypatch):
        def fail(*args, **kwargs):
            raise torch.linalg.LinAlgError("no convergence")

        monkeypatch.setattr(torch.linalg, "svd", fail)
        with pytest.raises(SvdConvergenceError):
            linalg.svd(torch.eye(2, dtype=DTYPE))


class TestTruncateRank:
    def test_eckart_young_error(self, generator):
        M = torch.randn(6, 5, generator=generator, dtype=DTYPE)
        S = linalg.singular_values(M)
        M2 = linalg.truncate_rank(M, 2)
        assert linalg.matrix_rank(M2) == 2
        error = torch.linalg.norm(M - M2) ** 2
        assert error.item() == pytest.approx((S[2:] ** 2).sum().item(), rel=1e-10)

    def test_full_rank_is_copy(self, generator):
        M = torch.randn(3, 3, generator=generator, dtype=DTYPE)
        out = linalg.truncate_rank(M, 3)
        torch.testing.assert_close(out, M)
        assert out.data_ptr() != M.data_ptr()

    def test_rank_zero(self, generator):
        M = torch.randn(3, 4, generator=generator, dtype=DTYPE)
        assert torch.all(linalg.truncate_rank(M, 0) == 0)

    @pytest.mark.parametrize("r", [-1, 4])
    def test_out_of_range(self, r):
        with pytest.raises(ValueError):
            linalg.truncate_rank(torch.ones(3, 5, dtype=DTYPE), r)


class TestVarianceRatio:
    def test_diagonal(self):
        M = torch.diag(torch.tensor([3.0, 1.0, 0.0], dtype=DTYPE))
        assert linalg.variance_ratio(M, 1) == pytest.approx(0.9)
        assert linalg.variance_ratio(M, 2) == pytest.approx(1.0)

    def test_zero_matrix(self):
        Z = torch.zeros(4, 3, dtype=DTYPE)
        assert linalg.variance_ratio(Z, 1) == 1.0
        assert linalg.variance_ratio(Z, 0) == 1.0

    def test_monotone_in_rank(self, generator):
        M = torch.randn(10, 6, generator=generator, dtype=DTYPE)
        ratios = [linalg.variance_ratio(M, r) for r in range(7)]
        assert ratios[0] == 0.0
        assert all(a <= b + 1e-15 for a, b in zip(ratios, ratios[1:]))
        assert ratios[-1] == pytest.approx(1.0)

    def test_spectrum_report(self, generator):
        M = torch.randn(10, 4, generator=generator, dtype=DTYPE)
        report = linalg.spectrum(M)
        assert sorted(report.variance_ratio_at) == [1, 2, 3, 4]
        assert report.variance_ratio_at[2] == pytest.approx(linalg.variance_ratio(M, 2))
        assert set(report.to_dict()["variance_ratio_at"]) == {"1", "2", "3", "4"}

    def test_centered_spectrum_drops_offset(self):
        # Rows share one offset plus a rank-1 signal: centering removes the offset direction.
        t = torch.linspace(-1, 1, 20, dtype=DTYPE).unsqueeze(1)
        M = t @ torch.tensor([[1.0, 0.0, 0.0]], dtype=DTYPE) + torch.tensor([0.0, 0.5, 0.5], dtype=DTYPE)
        assert linalg.spectrum(M, ranks=[1]).variance_ratio_at[1] < 0.99
        assert linalg.spectrum(M, ranks=[1], center=True).variance_ratio_at[1] == pytest.approx(1.0)


class TestMatrixRank:
    def test_relu_counter_example(self):
        A = torch.tensor([[1.0, -1.0, 1.0], [-1.0, 1.0, -1.0]], dtype=DTYPE)
        assert linalg.matrix_rank(A) == 1
        assert linalg.matrix_rank(torch.relu(A)) == 2
        assert linalg.relu_rank_example() == (1, 2)

    def test_zero(self):
        assert linalg.matrix_rank(torch.zeros(3, 3, dtype=DTYPE)) == 0

    def test_tolerance_must_be_positive(self):
        with pytest.raises(ValueError):
            linalg.matrix_rank(torch.eye(2, dtype=DTYPE), tol=0)


class TestPca:
    def test_components_orthonormal_and_deterministic(self, generator):
        data = torch.randn(40, 6, generator=generator, dtype=DTYPE)
        a = linalg.pca_fit(data, 3)
        b = linalg.pca_fit(data.clone(), 3)
        torch.testing.assert_close(a.components.T @ a.components, torch.eye(3, dtype=DTYPE))
        assert torch.equal(a.components, b.components)

    def test_top_component_of_a_line(self):
        # Unscaled PCA on points along (1, 1) recovers that direction.
        t = torch.linspace(-1, 1, 11, dtype=DTYPE).unsqueeze(1)
        data = t @ torch.tensor([[1.0, 1.0]], dtype=DTYPE)
        model = linalg.pca_fit(data, 1, standardize=False)
        expected = torch.tensor([[1.0], [1.0]], dtype=DTYPE) / 2**0.5
        torch.testing.assert_close(model.components, expected)

    def test_full_rank_round_trip(self, generator):
        data = torch.randn(15, 4, generator=generator, dtype=DTYPE)
        model, projected = linalg.pca_fit_transform(data, 4)
        torch.testing.assert_close(linalg.pca_inverse_transform(model, projected), data)

    def test_constant_column_is_not_scaled(self):
        data = torch.tensor([[1.0, 2.0], [3.0, 2.0], [5.0, 2.0]], dtype=DTYPE)
        model = linalg.pca_fit(data, 1)
        assert model.scale[1] == 1.0

    def test_fewer_rows_than_features(self, generator):
        data = torch.randn(3, 6, generator=generator, dtype=DTYPE)
        model = linalg.pca_fit(data, 5)
        assert model.components.shape == (6, 5)
        torch.testing.assert_close(
            model.components.T @ model.components, torch.eye(5, dtype=DTYPE), atol=1e-12, rtol=0
        )

    def test_needs_two_rows(self):
        with pytest.raises(ValueError):
            linalg.pca_fit(torch.ones(1, 3, dtype=DTYPE), 1)

    def test_transform_checks_width(self, generator):
        model = linalg.pca_fit(torch.randn(5, 3, generator=generator, dtype=DTYPE), 2)
        with pytest.raises(ValueError):
            linalg.pca_transform(model, torch.ones(2, 4, dtype=DTYPE))

    def test_model_dict_round_trip(self, generator):
        model = linalg.pca_fit(torch.randn(8, 3, generator=generator, dtype=DTYPE), 2)
        restored = linalg.PcaModel.from_dict(model.to_dict())
        assert torch.equal(restored.components, model.components)
        assert torch.equal(restored.mean, model.mean)


class TestMatrixJson:
    def test_size_mismatch(self):
        with pytest.raises(ValueError):
            linalg.matrix_from_json({"rows": 2, "cols": 2, "data": [1.0, 2.0, 3.0]})
