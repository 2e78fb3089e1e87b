#ifndef CSEFSL_H
#define CSEFSL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

#define CSEFSL_OK 0

#define CSEFSL_EINVAL 1

#define CSEFSL_ERUNTIME 2

#define CSEFSL_ENULL 3

/**
 * Opaque architecture handle.
 */
typedef struct CsefslArch CsefslArch;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Builds an architecture. `kind`: 0 dense (uses `dim`, `cut`, `hidden`,
 * `classes`), 1 cifar10, 2 femnist. `aux`: 0 mlp, 1 cnn-mlp with
 * `aux_channels`. Returns null on invalid arguments.
 */
struct CsefslArch *csefsl_arch_new(int kind,
                                   int aux,
                                   uintptr_t aux_channels,
                                   uintptr_t dim,
                                   uintptr_t cut,
                                   uintptr_t hidden,
                                   uintptr_t classes);

/**
 * Frees a handle returned by `csefsl_arch_new`. Null is a no-op.
 */
void csefsl_arch_free(struct CsefslArch *arch);

/**
 * Parameter counts: `which` selects 0 client, 1 aux, 2 server, 3 cut size.
 */
int csefsl_arch_param_count(const struct CsefslArch *arch, int which, uintptr_t *out);

/**
 * Closed-form per-epoch communication. `method`: 0 fsl_mc, 1 fsl_oc,
 * 2 fsl_an, 3 cse_fsl.
 */
int csefsl_analytic_comm(int method,
                         double q,
                         double alpha,
                         double w,
                         double a,
                         double d,
                         double n,
                         double h,
                         double *out);

/**
 * Closed-form peak server storage; same encoding as `csefsl_analytic_comm`.
 */
int csefsl_analytic_storage(int method,
                            double q,
                            double alpha,
                            double w,
                            double a,
                            double d,
                            double n,
                            double h,
                            double *out);

/**
 * Client-side convergence bound.
 */
int csefsl_client_bound(double l, double g1, double h, double t, double delta_c, double *out);

/**
 * Server-side convergence bound.
 */
int csefsl_server_bound(double l,
                        double g2,
                        double n,
                        double t,
                        double delta_s,
                        double d_sum,
                        double *out);

/**
 * Runs a full experiment from a TOML config path. Writes nothing; returns
 * the final test accuracy, cumulative communication units, and peak
 * storage units. `seed_override` < 0 keeps the config's seed.
 */
int csefsl_run_config(const char *config_path,
                      int64_t seed_override,
                      double *out_top1,
                      double *out_comm,
                      double *out_storage);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CSEFSL_H */
