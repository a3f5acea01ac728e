"""EMA target updates and the FIFO memory bank against a shadow-list oracle."""

import math

import numpy as np
import pytest
import torch

from vidcl.core import Config, InputError, Rng
from vidcl.model import BackboneConfig, clone_momentum, make_model
from vidcl.momentum import MemoryBank, ema_update


def unit_rows(rng, n, d=4, dtype=torch.float64):
    rows = rng.normal(size=(n, d))
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    return torch.from_numpy(rows).to(dtype)


def micro_models(seed=0):
    cfg = Config(crop_size=16, head_hidden=8, head_out=4)
    bcfg = BackboneConfig(stage_channels=(4, 8), stage_blocks=(1, 1), stage_heads=(1, 1))
    online = make_model(cfg, Rng(seed), torch.float64, bcfg)
    return online, clone_momentum(online)


class TestEmaUpdate:
    def test_m_one_keeps_momentum(self):
        online, mom = micro_models()
        with torch.no_grad():
            for p in online.parameters():
                p.add_(1.0)
        before = [p.clone() for p in mom.parameters()]
        ema_update(mom, online, 1.0)
        for b, p in zip(before, mom.parameters()):
            assert torch.equal(b, p)

    def test_m_zero_copies_online(self):
        online, mom = micro_models()
        with torch.no_grad():
            for p in online.parameters():
                p.add_(0.5)
        ema_update(mom, online, 0.0)
        for po, pm in zip(online.parameters(), mom.parameters()):
            assert torch.equal(po, pm)

    def test_scalar_geometric_decay(self):
        # theta = 1, theta' = 0, m = 0.999, three applications -> 0.999^3
        theta = torch.nn.Parameter(torch.tensor([1.0], dtype=torch.float64))
        target = torch.nn.Parameter(torch.tensor([0.0], dtype=torch.float64))
        mom = torch.nn.ParameterDict({"w": theta})
        onl = torch.nn.ParameterDict({"w": target})
        for _ in range(3):
            ema_update(mom, onl, 0.999)
        assert float(theta.detach()) == pytest.approx(0.997002999, abs=1e-12)

    def test_fixed_point_decay_law(self):
        # frozen online: ||theta_k - theta'|| = m^k ||theta_0 - theta'||
        online, mom = micro_models()
        m = 0.999

        def gap():
            return math.sqrt(sum(
                float(((pm - po) ** 2).sum())
                for po, pm in zip(online.parameters(), mom.parameters())
            ))

        with torch.no_grad():
            for p in mom.parameters():
                p.add_(torch.randn_like(p) * 0.1)
        g0 = gap()
        for k in (1, 10, 100):
            online2, mom2 = micro_models()
            with torch.no_grad():
                for p2, p in zip(mom2.parameters(), mom.parameters()):
                    p2.copy_(p)
            for _ in range(k):
                ema_update(mom2, online, m)
            gk = math.sqrt(sum(
                float(((pm - po) ** 2).sum())
                for po, pm in zip(online.parameters(), mom2.parameters())
            ))
            assert abs(gk - m**k * g0) / (m**k * g0) < 1e-12

    def test_shape_mismatch_names_tensor(self):
        online, _ = micro_models()
        other = make_model(
            Config(crop_size=16, head_hidden=8, head_out=8),  # different head width
            Rng(0), torch.float64,
            BackboneConfig(stage_channels=(4, 8), stage_blocks=(1, 1), stage_heads=(1, 1)),
        )
        with pytest.raises(InputError, match="head_v.fc2"):
            ema_update(other, online, 0.999)

    def test_bad_coefficient(self):
        online, mom = micro_models()
        with pytest.raises(InputError, match="momentum coefficient"):
            ema_update(mom, online, 1.5)


class TestMemoryBank:
    def test_fifo_overwrite(self):
        bank = MemoryBank(3, 4, torch.float64)
        rng = Rng(0)
        keys = unit_rows(rng, 4)
        for row in keys:
            bank.enqueue(row)
        out = bank.negatives()
        np.testing.assert_array_equal(out.numpy(), keys[1:].numpy())

    def test_enqueue_into_empty(self):
        bank = MemoryBank(8, 4, torch.float64)
        bank.enqueue(unit_rows(Rng(1), 5))
        assert bank.count == 5

    def test_snapshot_isolation(self):
        bank = MemoryBank(4, 4, torch.float64)
        rng = Rng(2)
        bank.enqueue(unit_rows(rng, 2))
        snap = bank.negatives()
        frozen = snap.clone()
        bank.enqueue(unit_rows(rng, 3))
        assert torch.equal(snap, frozen)

    def test_single_key(self):
        bank = MemoryBank(4, 4, torch.float64)
        k = unit_rows(Rng(3), 1)
        bank.enqueue(k)
        assert torch.equal(bank.negatives(), k)

    def test_empty_bank_error(self):
        with pytest.raises(InputError, match="empty"):
            MemoryBank(4, 4).negatives()

    def test_non_unit_norm_rejected(self):
        bank = MemoryBank(4, 4, torch.float64)
        with pytest.raises(InputError, match="unit-norm"):
            bank.enqueue(torch.full((1, 4), 0.9, dtype=torch.float64))

    def test_oversized_batch_keeps_tail(self):
        bank = MemoryBank(3, 4, torch.float64)
        keys = unit_rows(Rng(4), 7)
        bank.enqueue(keys)
        np.testing.assert_array_equal(bank.negatives().numpy(), keys[-3:].numpy())

    @pytest.mark.parametrize("capacity", [1, 8, 64])
    def test_shadow_list_oracle(self, capacity):
        bank = MemoryBank(capacity, 4, torch.float64)
        shadow: list[np.ndarray] = []
        rng = Rng(capacity)
        for _ in range(500):
            op = rng.uniform()
            if op < 0.7 or not shadow:
                n = int(rng.integers(1, 5))
                keys = unit_rows(rng, n)
                bank.enqueue(keys)
                shadow.extend(k.numpy() for k in keys)
                shadow[:] = shadow[-capacity:]
            else:
                got = bank.negatives().numpy()
                np.testing.assert_array_equal(got, np.stack(shadow))
            assert bank.count == min(len(shadow), capacity) == len(shadow)

    def test_state_round_trip(self):
        bank = MemoryBank(4, 4, torch.float64)
        bank.enqueue(unit_rows(Rng(5), 6))
        back = MemoryBank.from_state(bank.state())
        assert torch.equal(back.negatives(), bank.negatives())
        assert (back.count, back.cursor) == (bank.count, bank.cursor)
