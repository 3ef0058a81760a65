#pragma once

#include "mdflow/common.hpp"

#include <cstring>
#include <vector>

namespace mdflow {

// Writable / read-only views over row blocks or head column slices of a
// row-major matrix (outer stride = parent width).
template <typename T>
using MatRef = Eigen::Ref<Mat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using MatCRef = Eigen::Ref<const Mat<T>, 0, Eigen::OuterStride<>>;

// High-water mark of attention-internal scratch buffers, per thread. The
// benchmark reads this to verify the kernels' memory scaling; inputs and
// outputs are not counted.
namespace detail {
inline thread_local size_t ws_bytes = 0;
inline thread_local size_t ws_peak = 0;
}  // namespace detail

struct WorkspaceMeter {
    static void reset() { detail::ws_bytes = detail::ws_peak = 0; }
    static size_t peak_bytes() { return detail::ws_peak; }
};

template <typename T>
class Scratch {
public:
    explicit Scratch(size_t n) : buf_(n) {
        detail::ws_bytes += n * sizeof(T);
        if (detail::ws_bytes > detail::ws_peak) detail::ws_peak = detail::ws_bytes;
    }
    ~Scratch() { detail::ws_bytes -= buf_.size() * sizeof(T); }
    Scratch(const Scratch&) = delete;
    Scratch& operator=(const Scratch&) = delete;
    T* data() { return buf_.data(); }

private:
    std::vector<T> buf_;
};

inline constexpr Eigen::Index kAttnRowBlock = 64;
inline constexpr Eigen::Index kOracleMaxTokens = 4096;

inline void check_mask_binary(const uint8_t* mask, Eigen::Index n) {
    for (Eigen::Index i = 0; i < n; ++i)
        require(mask[i] == 0 || mask[i] == 1, "attention mask must be binary");
}

// Masked linear attention for a single head:
//
//   O_i = relu(Q_i) S / (relu(Q_i) z + eps),  S = sum_j m_j relu(K_j)^T V_j,
//                                             z = sum_j m_j relu(K_j)^T.
//
// Keys and queries are streamed in fixed-size row blocks, so the scratch
// footprint is O(d^2) regardless of the token count; no (MN)^2 buffer ever
// exists. The d x d and d x 1 sums accumulate in double and are cast down
// once before the query pass. Masked rows are skipped outright, which makes
// the output bit-exactly independent of their K/V contents. A row with
// relu(Q_i) = 0 (or an all-masked sequence) yields O_i = 0 exactly: the
// numerator vanishes and the denominator is eps.
// Accumulates S = sum_j m_j relu(K_j)^T V_j and z = sum_j m_j relu(K_j)^T in
// row blocks: each block partial sum is one working-precision GEMM, the
// running totals are kept in double and cast down once at the end. Masked
// rows are zeroed before the product, so their K/V contents never enter.
template <typename T>
void accumulate_key_sums(MatCRef<T> K, MatCRef<T> V, const uint8_t* mask,
                         Eigen::Map<Mat<double>>& S, Eigen::Map<Vec<double>>& z) {
    const Eigen::Index n = K.rows(), d = K.cols();
    S.setZero();
    z.setZero();
    const Eigen::Index B = kAttnRowBlock;
    Scratch<T> kb{size_t(B) * d}, sb{size_t(d) * d};
    Eigen::Map<Mat<T>> phi_k(kb.data(), B, d), s_blk(sb.data(), d, d);
    for (Eigen::Index j0 = 0; j0 < n; j0 += B) {
        const Eigen::Index bn = std::min(B, n - j0);
        phi_k.topRows(bn) = K.middleRows(j0, bn).cwiseMax(T(0));
        for (Eigen::Index j = 0; j < bn; ++j)
            if (!mask[j0 + j]) phi_k.row(j).setZero();
        s_blk.noalias() = phi_k.topRows(bn).transpose() * V.middleRows(j0, bn);
        S += s_blk.template cast<double>();
        z += phi_k.topRows(bn).colwise().sum().transpose().template cast<double>();
    }
}

template <typename T>
void masked_linear_attention_head(MatCRef<T> Q, MatCRef<T> K, MatCRef<T> V,
                                  const uint8_t* mask, T eps_den, MatRef<T> O) {
    const Eigen::Index n = Q.rows(), d = Q.cols();
    require(K.rows() == n && V.rows() == n && K.cols() == d && V.cols() == d,
            "attention: Q/K/V shape mismatch");
    require(O.rows() == n && O.cols() == d, "attention: output shape mismatch");

    Scratch<double> s_acc{size_t(d) * d}, z_acc{size_t(d)};
    Eigen::Map<Mat<double>> S(s_acc.data(), d, d);
    Eigen::Map<Vec<double>> z(z_acc.data(), d);
    accumulate_key_sums<T>(K, V, mask, S, z);

    const Eigen::Index B = kAttnRowBlock;
    Scratch<T> st{size_t(d) * d}, zt{size_t(d)};
    Eigen::Map<Mat<T>> S_t(st.data(), d, d);
    Eigen::Map<Vec<T>> z_t(zt.data(), d);
    S_t = S.template cast<T>();
    z_t = z.template cast<T>();

    Scratch<T> qb{size_t(B) * d}, nb{size_t(B) * d}, db{size_t(B)};
    Eigen::Map<Mat<T>> phi_q(qb.data(), B, d), num(nb.data(), B, d);
    Eigen::Map<Vec<T>> den(db.data(), B);
    for (Eigen::Index i0 = 0; i0 < n; i0 += B) {
        const Eigen::Index bn = std::min(B, n - i0);
        phi_q.topRows(bn) = Q.middleRows(i0, bn).cwiseMax(T(0));
        num.topRows(bn).noalias() = phi_q.topRows(bn) * S_t;
        den.head(bn).noalias() = phi_q.topRows(bn) * z_t;
        den.head(bn).array() += eps_den;
        O.middleRows(i0, bn) =
            (num.topRows(bn).array().colwise() / den.head(bn).array()).matrix();
    }
}

// Dense reference for the same formula: materializes the full MN x MN weight
// matrix w_ij = relu(Q_i) relu(m_j K_j)^T and normalizes per row. Quadratic
// in time and memory; guarded to small token counts.
template <typename T>
Mat<T> masked_attention_oracle_head(MatCRef<T> Q, MatCRef<T> K, MatCRef<T> V,
                                    const uint8_t* mask, T eps_den) {
    const Eigen::Index n = Q.rows(), d = Q.cols();
    require(K.rows() == n && V.rows() == n && K.cols() == d && V.cols() == d,
            "oracle: Q/K/V shape mismatch");
    require(n <= kOracleMaxTokens, "oracle: token count exceeds the quadratic size guard");

    Scratch<T> wb{size_t(n) * n}, pq{size_t(n) * d}, pk{size_t(n) * d};
    Eigen::Map<Mat<T>> W(wb.data(), n, n), phi_q(pq.data(), n, d), phi_k(pk.data(), n, d);
    phi_q = Q.cwiseMax(T(0));
    for (Eigen::Index j = 0; j < n; ++j) {
        if (mask[j])
            phi_k.row(j) = K.row(j).cwiseMax(T(0));
        else
            phi_k.row(j).setZero();
    }

    W.noalias() = phi_q * phi_k.transpose();
    Mat<T> O(n, d);
    O.noalias() = W * V;
    Vec<T> den = W.rowwise().sum();
    den.array() += eps_den;
    O = (O.array().colwise() / den.array()).matrix();
    return O;
}

// Parameters of one multi-head masked linear attention layer.
template <typename T>
struct AttentionParams {
    Mat<T> wq, wk, wv, wo;  // each D x D, y = x W^T + b
    Mat<T> bq, bk, bv, bo;  // 1 x D
};

// Q/K/V/mask bundle for kernel-level tests and benchmarks. Head h owns the
// column slice [h*d, (h+1)*d).
template <typename T>
struct AttentionBatch {
    Mat<T> q, k, v;
    std::vector<uint8_t> mask;
    int heads = 1;

    void validate() const {
        require(q.rows() == k.rows() && q.rows() == v.rows() && q.cols() == k.cols() &&
                    q.cols() == v.cols(),
                "AttentionBatch: Q/K/V shapes differ");
        require(heads >= 1 && q.cols() % heads == 0,
                "AttentionBatch: head count must divide the feature dim");
        require(Eigen::Index(mask.size()) == q.rows(), "AttentionBatch: mask length mismatch");
        check_mask_binary(mask.data(), Eigen::Index(mask.size()));
    }
};

template <typename T>
Mat<T> masked_linear_attention(const AttentionBatch<T>& batch, T eps_den) {
    batch.validate();
    const Eigen::Index d = batch.q.cols() / batch.heads;
    Mat<T> O(batch.q.rows(), batch.q.cols());
    for (int h = 0; h < batch.heads; ++h)
        masked_linear_attention_head<T>(
            batch.q.middleCols(h * d, d), batch.k.middleCols(h * d, d),
            batch.v.middleCols(h * d, d), batch.mask.data(), eps_den,
            O.middleCols(h * d, d));
    return O;
}

template <typename T>
Mat<T> masked_attention_oracle(const AttentionBatch<T>& batch, T eps_den) {
    batch.validate();
    const Eigen::Index d = batch.q.cols() / batch.heads;
    Mat<T> O(batch.q.rows(), batch.q.cols());
    for (int h = 0; h < batch.heads; ++h)
        O.middleCols(h * d, d) = masked_attention_oracle_head<T>(
            batch.q.middleCols(h * d, d), batch.k.middleCols(h * d, d),
            batch.v.middleCols(h * d, d), batch.mask.data(), eps_den);
    return O;
}

// Full learned layer: project, attend per head, concatenate, project out.
template <typename T>
Mat<T> multihead_linear_attention(const Mat<T>& x, const AttentionParams<T>& p, int heads,
                                  const std::vector<uint8_t>& mask, T eps_den) {
    require(x.cols() == p.wq.cols(), "multihead attention: input width mismatch");
    require(Eigen::Index(mask.size()) == x.rows(), "multihead attention: mask length mismatch");
    AttentionBatch<T> b;
    b.q.noalias() = x * p.wq.transpose();
    b.q.rowwise() += p.bq.row(0);
    b.k.noalias() = x * p.wk.transpose();
    b.k.rowwise() += p.bk.row(0);
    b.v.noalias() = x * p.wv.transpose();
    b.v.rowwise() += p.bv.row(0);
    b.mask = mask;
    b.heads = heads;
    Mat<T> o = masked_linear_attention(b, eps_den);
    Mat<T> out;
    out.noalias() = o * p.wo.transpose();
    out.rowwise() += p.bo.row(0);
    return out;
}

// Gradient of the streaming kernel w.r.t. Q, K, V. Recomputes the small sums
// instead of caching them; adds into dQ/dK/dV.
template <typename T>
void masked_linear_attention_backward_head(MatCRef<T> Q, MatCRef<T> K, MatCRef<T> V,
                                           const uint8_t* mask, T eps_den, MatCRef<T> dO,
                                           MatRef<T> dQ, MatRef<T> dK, MatRef<T> dV) {
    const Eigen::Index n = Q.rows(), d = Q.cols();

    Mat<T> phi_q = Q.cwiseMax(T(0));
    Mat<T> phi_k = K.cwiseMax(T(0));
    Vec<T> maskv(n);
    for (Eigen::Index j = 0; j < n; ++j) {
        maskv(j) = T(mask[j]);
        if (!mask[j]) phi_k.row(j).setZero();
    }

    // recompute the small sums exactly as the forward pass does
    Mat<double> S(d, d);
    Vec<double> z(d);
    {
        Eigen::Map<Mat<double>> Sm(S.data(), d, d);
        Eigen::Map<Vec<double>> zm(z.data(), d);
        accumulate_key_sums<T>(K, V, mask, Sm, zm);
    }
    Mat<T> S_t = S.template cast<T>();
    Vec<T> z_t = z.template cast<T>();

    Vec<T> den = ((phi_q * z_t).array() + eps_den).matrix();
    Mat<T> O = phi_q * S_t;
    O = (O.array().colwise() / den.array()).matrix();

    Mat<T> dnum = (dO.array().colwise() / den.array()).matrix();
    Vec<T> dden = (-(O.array() * dO.array()).rowwise().sum() / den.array()).matrix();

    Mat<T> dphi_q = dnum * S_t.transpose();
    dphi_q.noalias() += dden * z_t.transpose();
    Mat<T> dS = phi_q.transpose() * dnum;
    Vec<T> dz = phi_q.transpose() * dden;

    // zero phi rows make masked-row dV vanish; dK is masked explicitly
    Mat<T> dphi_k = V * dS.transpose();
    dphi_k.rowwise() += dz.transpose();
    dphi_k.array() *= (K.array() > T(0)).template cast<T>();
    dphi_k.array().colwise() *= maskv.array();

    dQ.array() += dphi_q.array() * (Q.array() > T(0)).template cast<T>();
    dK += dphi_k;
    dV.noalias() += phi_k * dS;
}

}  // namespace mdflow
