#include "mmctp/gemm.hpp"

#include <cstdlib>
#include <cstring>
#include <vector>

#include <dlfcn.h>

namespace mmctp {

namespace {

typedef void (*cblas_dgemm_fn)(int order, int trans_a, int trans_b, int m, int n,
                               int k, double alpha, const double* a, int lda,
                               const double* b, int ldb, double beta, double* c,
                               int ldc);

constexpr int kCblasRowMajor = 101;
constexpr int kCblasNoTrans = 111;
constexpr int kCblasTrans = 112;

// Products below this flop-ish threshold skip BLAS; call overhead dominates.
constexpr std::size_t kSmallProduct = 16384;

cblas_dgemm_fn load_blas() {
    if (const char* no = std::getenv("MMCTP_NO_BLAS"); no && no[0] == '1') {
        return nullptr;
    }
    // OpenBLAS picks its kernel set from /proc/cpuinfo's model string, which
    // virtualized CPUs often report generically. The library initializes in
    // an ELF constructor, so the only way to steer detection from inside the
    // process is to set the override before dlopen.
    if (!std::getenv("OPENBLAS_CORETYPE")) {
        if (__builtin_cpu_supports("avx512f")) {
            setenv("OPENBLAS_CORETYPE", "SKYLAKEX", 0);
        } else if (__builtin_cpu_supports("avx2")) {
            setenv("OPENBLAS_CORETYPE", "HASWELL", 0);
        }
    }
    void* handle = dlopen("libopenblas.so.0", RTLD_NOW | RTLD_LOCAL);
    if (!handle) handle = dlopen("libopenblas.so", RTLD_NOW | RTLD_LOCAL);
    if (!handle) return nullptr;
    if (auto set_threads =
            reinterpret_cast<void (*)(int)>(dlsym(handle, "openblas_set_num_threads"))) {
        set_threads(1);
    }
    return reinterpret_cast<cblas_dgemm_fn>(dlsym(handle, "cblas_dgemm"));
}

cblas_dgemm_fn blas_dgemm() {
    static cblas_dgemm_fn fn = load_blas();
    return fn;
}

// Packs op(X) (r rows, c cols after the optional transpose) into dst.
void pack(bool trans, const double* x, std::size_t ld, std::size_t r, std::size_t c,
          std::vector<double>& dst) {
    dst.resize(r * c);
    if (!trans) {
        for (std::size_t i = 0; i < r; ++i) {
            std::memcpy(dst.data() + i * c, x + i * ld, c * sizeof(double));
        }
    } else {
        for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < c; ++j) {
                dst[i * c + j] = x[j * ld + i];
            }
        }
    }
}

// Blocked i-k-j kernel; the inner j loop vectorizes without any reassociation.
void gemm_builtin(bool trans_a, bool trans_b, std::size_t m, std::size_t n,
                  std::size_t k, double alpha, const double* a, std::size_t lda,
                  const double* b, std::size_t ldb, double beta, double* c,
                  std::size_t ldc) {
    thread_local std::vector<double> a_buf, b_buf;
    const double* ap = a;
    std::size_t lda_eff = lda;
    if (trans_a) {
        pack(true, a, lda, m, k, a_buf);
        ap = a_buf.data();
        lda_eff = k;
    }
    const double* bp = b;
    std::size_t ldb_eff = ldb;
    if (trans_b) {
        pack(true, b, ldb, k, n, b_buf);
        bp = b_buf.data();
        ldb_eff = n;
    }
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * ldc;
        if (beta == 0.0) {
            std::memset(crow, 0, n * sizeof(double));
        } else if (beta != 1.0) {
            for (std::size_t j = 0; j < n; ++j) crow[j] *= beta;
        }
    }
    constexpr std::size_t kc = 256, ic = 64;
    for (std::size_t k0 = 0; k0 < k; k0 += kc) {
        std::size_t k1 = std::min(k, k0 + kc);
        for (std::size_t i0 = 0; i0 < m; i0 += ic) {
            std::size_t i1 = std::min(m, i0 + ic);
            for (std::size_t i = i0; i < i1; ++i) {
                double* crow = c + i * ldc;
                for (std::size_t kk = k0; kk < k1; ++kk) {
                    double av = alpha * ap[i * lda_eff + kk];
                    const double* brow = bp + kk * ldb_eff;
                    for (std::size_t j = 0; j < n; ++j) {
                        crow[j] += av * brow[j];
                    }
                }
            }
        }
    }
}

}  // namespace

bool gemm_uses_blas() { return blas_dgemm() != nullptr; }

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          double alpha, const double* a, std::size_t lda, const double* b,
          std::size_t ldb, double beta, double* c, std::size_t ldc) {
    if (m == 0 || n == 0) return;
    if (k == 0) {
        for (std::size_t i = 0; i < m; ++i) {
            double* crow = c + i * ldc;
            if (beta == 0.0) {
                std::memset(crow, 0, n * sizeof(double));
            } else if (beta != 1.0) {
                for (std::size_t j = 0; j < n; ++j) crow[j] *= beta;
            }
        }
        return;
    }
    cblas_dgemm_fn fn = blas_dgemm();
    if (fn && m * n * k >= kSmallProduct) {
        fn(kCblasRowMajor, trans_a ? kCblasTrans : kCblasNoTrans,
           trans_b ? kCblasTrans : kCblasNoTrans, static_cast<int>(m),
           static_cast<int>(n), static_cast<int>(k), alpha, a, static_cast<int>(lda),
           b, static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
        return;
    }
    gemm_builtin(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

}  // namespace mmctp
