// Times the OpenMP kernels against the serial reference on block-sized shapes.
#include <chrono>
#include <cstdio>
#include <functional>
#include <random>

#include "flatkit/kernels.hpp"
#include "flatkit/linalg.hpp"

using namespace flatkit;

namespace {

double time_ms(const std::function<void()>& f, int reps) {
  f();
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < reps; ++i) f();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

}  // namespace

int main() {
  const int threads = configure_threads_from_env();
  std::mt19937_64 rng(1);
  std::printf("threads=%d\n", threads);
  std::printf("%-10s %-18s %12s %12s %8s %12s\n", "kernel", "shape", "serial_ms", "omp_ms", "speedup", "max_diff");
  const struct { std::size_t m, k, n; } mm[] = {{256, 64, 64}, {256, 128, 128}, {512, 512, 512}, {1024, 256, 1024}};
  for (const auto& s : mm) {
    const Matrix a = random_normal(s.m, s.k, 1.0, rng);
    const Matrix b = random_normal(s.k, s.n, 1.0, rng);
    const int reps = s.m * s.k * s.n > 100'000'000 ? 3 : 20;
    Matrix r1, r2;
    const double ts = time_ms([&] { r1 = reference::matmul(a, b); }, reps);
    const double tp = time_ms([&] { r2 = kernels::matmul(a, b); }, reps);
    char shape[32];
    std::snprintf(shape, sizeof shape, "%zux%zux%zu", s.m, s.k, s.n);
    std::printf("%-10s %-18s %12.3f %12.3f %8.2f %12.3g\n", "matmul", shape, ts, tp, ts / tp, max_abs_diff(r1, r2));
  }
  const struct { std::size_t rows, n1, n2; } kr[] = {{256, 8, 8}, {1024, 8, 16}, {2048, 64, 64}, {2048, 64, 128}};
  for (const auto& s : kr) {
    const Matrix x = random_normal(s.rows, s.n1 * s.n2, 1.0, rng);
    const Matrix p1 = random_normal(s.n1, s.n1, 1.0, rng);
    const Matrix p2 = random_normal(s.n2, s.n2, 1.0, rng);
    const int reps = s.n1 * s.n2 > 4096 ? 3 : 20;
    Matrix r1, r2;
    const double ts = time_ms([&] { r1 = reference::kron_rows(x, p1, p2); }, reps);
    const double tp = time_ms([&] { r2 = kernels::kron_rows(x, p1, p2); }, reps);
    char shape[32];
    std::snprintf(shape, sizeof shape, "%zux(%zu,%zu)", s.rows, s.n1, s.n2);
    std::printf("%-10s %-18s %12.3f %12.3f %8.2f %12.3g\n", "kron_rows", shape, ts, tp, ts / tp, max_abs_diff(r1, r2));
  }
  return 0;
}
