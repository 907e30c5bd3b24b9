import numpy as np
import pytest

from augsearch import autodiff as ad
from augsearch import bilevel as bl
from augsearch import data as dat
from augsearch import policy as pol
from augsearch.autodiff import Tape, Tensor


class TestOptimizers:
    def test_sgd_zero_gradient_no_move(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        opt = bl.SGD([p], bl.SGDConfig(lr=0.1, weight_decay=0.0))
        opt.step({p: np.zeros(2)})
        np.testing.assert_array_equal(p.data, [1.0, 2.0])

    def test_sgd_quadratic_no_momentum(self):
        cfg = bl.SGDConfig(lr=0.1, momentum=0.0, nesterov=False, weight_decay=0.0)
        p = Tensor(np.array(3.0), requires_grad=True)
        opt = bl.SGD([p], cfg)
        a = 1.0
        opt.step({p: 2 * (p.data - a)})
        assert abs(p.data - (3.0 - 0.2 * (3.0 - 1.0))) < 1e-15

    def test_sgd_two_step_nesterov_hand_oracle(self):
        # momentum buffer v <- m v + g, step uses g + m v (Nesterov lookahead)
        lr, m = 0.1, 0.9
        cfg = bl.SGDConfig(lr=lr, momentum=m, nesterov=True, weight_decay=0.0)
        p = Tensor(np.array(1.0), requires_grad=True)
        opt = bl.SGD([p], cfg)
        g = 0.5
        x, v = 1.0, 0.0
        for _ in range(2):
            opt.step({p: np.array(g)})
            v = m * v + g
            x = x - lr * (g + m * v)
        assert abs(p.data - x) < 1e-15

    def test_sgd_weight_decay(self):
        cfg = bl.SGDConfig(lr=1.0, momentum=0.0, nesterov=False, weight_decay=0.1)
        p = Tensor(np.array(2.0), requires_grad=True)
        bl.SGD([p], cfg).step({p: np.array(0.0)})
        assert abs(p.data - (2.0 - 0.1 * 2.0)) < 1e-15

    def test_adam_first_step_is_lr_sized(self):
        p = Tensor(np.array(0.0), requires_grad=True)
        opt = bl.Adam(p, lr=0.01)
        opt.step(np.array(5.0))
        assert abs(-p.data / 0.01 - 1.0) < 1e-6


class TestLosses:
    def test_val_loss_uniform_logits(self, rng):
        model = dat.TinyClassifier(in_shape=(3, 8, 8), classes=10, seed=0)
        for p in model.params():
            p.data = np.zeros_like(p.data)
        x = rng.uniform(0, 1, (4, 3, 8, 8))
        loss = bl.val_loss(model, x, np.arange(4) % 10)
        assert abs(loss.item() - np.log(10)) < 1e-12

    def test_train_loss_depth_zero_equals_val_loss(self, rng):
        model = dat.TinyClassifier(in_shape=(3, 8, 8), classes=2, seed=1)
        phi = pol.init_policy(14, 2)
        phi.delta.data = np.array([80.0, -80.0, -80.0])
        x = rng.uniform(0, 1, (4, 3, 8, 8))
        y = np.array([0, 1, 0, 1])
        lt = bl.train_loss(model, phi, x, y, 0.7, 10, rng=np.random.default_rng(0))
        lv = bl.val_loss(model, x, y)
        assert abs(lt.item() - lv.item()) < 1e-12

    def test_empty_batch_rejected(self):
        model = dat.TinyClassifier(in_shape=(3, 8, 8), classes=2, seed=1)
        phi = pol.init_policy(14, 2)
        with pytest.raises(ValueError, match="empty"):
            bl.train_loss(model, phi, np.zeros((0, 3, 8, 8)), np.zeros(0, dtype=int),
                          0.7, 10, rng=np.random.default_rng(0))

    def test_train_loss_gradient_wrt_mu_matches_fd(self, rng):
        model = dat.TinyClassifier(in_shape=(3, 8, 8), classes=2, seed=2, channels=(3, 4))
        phi = pol.init_policy(14, 2)
        x = rng.uniform(0, 1, (2, 3, 8, 8))
        y = np.array([0, 1])
        noise = pol.draw_policy_noise(phi, 2, np.random.default_rng(1))
        with Tape() as tape:
            loss = bl.train_loss(model, phi, x, y, 0.8, 8, noise=noise)
        grad = tape.backward(loss)[phi.mu]
        idx = np.unravel_index(int(np.abs(grad).argmax()), grad.shape)
        h = 1e-5
        base = phi.mu.data.copy()

        def value(mu):
            p2 = pol.PolicyParams(delta=phi.delta.detach(), pi=phi.pi.detach(),
                                  mu=Tensor(mu))
            return bl.train_loss(model, p2, x, y, 0.8, 8, noise=noise).item()

        up, dn = base.copy(), base.copy()
        up[idx] += h
        dn[idx] -= h
        fd = (value(up) - value(dn)) / (2 * h)
        assert abs(grad[idx] - fd) < 1e-3 * max(1.0, abs(fd))


class ScalarModel:
    """Quadratic stand-in with a single scalar parameter."""

    def __init__(self, value):
        self.theta = Tensor(np.array(value), requires_grad=True)

    def params(self):
        return [self.theta]


class TestHypergradientOracle:
    def run_fd(self, theta0, phi0, eta, scale, mode="finite-difference",
               grad_point="exact-point"):
        model = ScalarModel(theta0)
        phi = Tensor(np.array(phi0), requires_grad=True)

        def train_eval():
            diff = model.theta - phi
            return diff * diff

        def val_eval():
            return model.theta * model.theta

        cfg = bl.HypergradConfig(mode=mode, fd_epsilon_scale=scale,
                                 grad_point=grad_point)
        hyper, _ = bl.fd_hypergradient(model.params(), {"phi": phi},
                                       train_eval, val_eval, eta, cfg)
        assert abs(model.theta.data - theta0) < 1e-15  # parameters restored
        return float(hyper["phi"])

    def test_quadratic_matches_analytic_four_eta_theta_prime(self):
        theta0, phi0, eta = 1.3, 0.4, 0.05
        theta_prime = theta0 - eta * 2 * (theta0 - phi0)
        exact = 4 * eta * theta_prime
        for scale in (1e-2, 1e-3, 1e-4):
            got = self.run_fd(theta0, phi0, eta, scale)
            assert abs(got - exact) < 1e-6

    def test_error_decays_quadratically_on_nonquadratic_loss(self):
        # L_train = (theta - phi)^4 has a phi-gradient nonlinear in theta, so
        # the central difference error follows eps^2
        theta0, phi0, eta = 1.1, 0.3, 0.05

        def run(scale):
            model = ScalarModel(theta0)
            phi = Tensor(np.array(phi0), requires_grad=True)

            def train_eval():
                diff = model.theta - phi
                return (diff * diff) * (diff * diff)

            def val_eval():
                return model.theta * model.theta

            cfg = bl.HypergradConfig(fd_epsilon_scale=scale)
            hyper, _ = bl.fd_hypergradient(model.params(), {"phi": phi},
                                           train_eval, val_eval, eta, cfg)
            return float(hyper["phi"])

        d = theta0 - phi0
        theta_prime = theta0 - eta * 4 * d**3
        # d/dphi L_val(theta - eta * 4 (theta-phi)^3) = 2 theta' * eta * 12 d^2
        exact = 2 * theta_prime * eta * 12 * d**2
        errors = [abs(run(s) - exact) for s in (1e-1, 1e-2, 1e-3)]
        assert errors[0] > errors[1] > errors[2]
        order = np.log10(errors[0] / errors[2]) / 2
        assert 1.6 < order < 2.4

    def test_train_loss_independent_of_phi_gives_zero(self):
        model = ScalarModel(0.9)
        phi = Tensor(np.array(0.2), requires_grad=True)

        def train_eval():
            return model.theta * model.theta

        def val_eval():
            return model.theta * model.theta

        hyper, _ = bl.fd_hypergradient(model.params(), {"phi": phi},
                                       train_eval, val_eval, 0.1,
                                       bl.HypergradConfig())
        assert hyper["phi"] == 0.0

    def test_eta_zero_gives_zero(self):
        assert self.run_fd(1.3, 0.4, 0.0, 1e-3) == 0.0

    def test_one_sided_mode_close_to_central(self):
        central = self.run_fd(1.3, 0.4, 0.05, 1e-4)
        one_sided = self.run_fd(1.3, 0.4, 0.05, 1e-4, mode="one-sided")
        assert abs(central - one_sided) < 1e-5

    def test_paper_point_evaluates_v_at_theta(self):
        # for the quadratic toy the paper form gives 4 * eta * theta instead
        theta0, phi0, eta = 1.3, 0.4, 0.05
        got = self.run_fd(theta0, phi0, eta, 1e-4, grad_point="paper-point")
        assert abs(got - 4 * eta * theta0) < 1e-6

    def test_zero_validation_gradient_skips(self):
        model = ScalarModel(0.0)  # val gradient 2*theta = 0
        phi = Tensor(np.array(0.3), requires_grad=True)

        def train_eval():
            diff = model.theta - phi
            return diff * diff

        def val_eval():
            return model.theta * model.theta

        hyper, lv = bl.fd_hypergradient(model.params(), {"phi": phi},
                                        train_eval, val_eval, 0.0,
                                        bl.HypergradConfig())
        assert hyper is None
        assert lv == 0.0


class TestSearchLoop:
    @pytest.fixture(scope="class")
    def tiny_dataset(self):
        return dat.synth_rotation_task(200, 1)

    def small_config(self, **kw):
        base = dict(epochs=2, batch_size=16, max_depth=2, seed=3,
                    channels=(2, 3))
        base.update(kw)
        return bl.SearchConfig(**base)

    def test_frozen_everything_keeps_initialization(self, tiny_dataset):
        cfg = self.small_config(freeze=frozenset({"mu", "pi", "delta"}))
        result = bl.run_search(cfg, tiny_dataset)
        init = pol.init_policy(14, 2)
        np.testing.assert_array_equal(result.phi.delta.data, init.delta.data)
        np.testing.assert_array_equal(result.phi.pi.data, init.pi.data)
        np.testing.assert_array_equal(result.phi.mu.data, init.mu.data)

    def test_seeded_run_reproducible(self, tiny_dataset):
        cfg = self.small_config(epochs=1)
        a = bl.run_search(cfg, tiny_dataset)
        b = bl.run_search(cfg, tiny_dataset)
        assert a.rows == b.rows
        np.testing.assert_array_equal(a.phi.pi.data, b.phi.pi.data)

    def test_metrics_header_schema(self, tiny_dataset):
        cfg = self.small_config(epochs=1)
        result = bl.run_search(cfg, tiny_dataset)
        assert result.header == [
            "epoch", "t", "train_loss", "val_loss",
            "depth_p0", "depth_p1", "depth_p2",
            "perm_entropy_1", "perm_entropy_2",
            "mean_sigma_l", "mean_sigma_u",
        ]
        assert len(result.rows) == 1
        assert len(result.rows[0]) == len(result.header)

    def test_updates_gated_by_warmup(self, tiny_dataset):
        # warm-up thresholds beyond the run length freeze all phi groups
        sched = pol.ScheduleConfig(warmup_mu=2.0, warmup_pi=2.0, warmup_delta=2.0)
        cfg = self.small_config(sched=sched)
        result = bl.run_search(cfg, tiny_dataset)
        init = pol.init_policy(14, 2)
        np.testing.assert_array_equal(result.phi.pi.data, init.pi.data)

    def test_too_small_batch_rejected(self, tiny_dataset):
        cfg = self.small_config(batch_size=500)
        with pytest.raises(ValueError, match="smaller"):
            bl.run_search(cfg, tiny_dataset)


class TestGradVariance:
    def test_per_image_variance_below_per_batch(self, rng):
        # the reduction shows up once the classifier carries signal; at a
        # random initialization the two estimators are comparable
        ds = dat.synth_rotation_task(200, 2)
        train, _ = dat.split_half(ds, 0)
        model = dat.TinyClassifier(seed=0, classes=2)
        opt = bl.SGD(model.params(), bl.SGDConfig())
        order_rng = np.random.default_rng(3)
        for _ in range(3 * (len(train) // 25)):
            idx = order_rng.permutation(len(train))[:25]
            with Tape() as tape:
                loss = dat.cross_entropy(model.forward(train.images[idx]),
                                         train.labels[idx])
            opt.step(tape.backward(loss))
        phi = pol.init_policy(14, 2)
        x = train.images[:16]
        y = train.labels[:16]
        var_img = bl.policy_grad_variance(model, phi, x, y, 0.5, 5,
                                          np.random.default_rng(1), "per-image",
                                          resamplings=60)
        var_batch = bl.policy_grad_variance(model, phi, x, y, 0.5, 5,
                                            np.random.default_rng(2), "per-batch",
                                            resamplings=60)
        assert var_img < var_batch
