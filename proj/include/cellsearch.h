#ifndef CELLSEARCH_H
#define CELLSEARCH_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#  if defined(CELLSEARCH_BUILDING)
#    define CS_API __declspec(dllexport)
#  else
#    define CS_API __declspec(dllimport)
#  endif
#else
#  define CS_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum cs_status {
  CS_OK = 0,
  CS_ERR_CONFIG = 1,
  CS_ERR_SHAPE = 2,
  CS_ERR_USAGE = 3,
  CS_ERR_PARSE = 4,
  CS_ERR_IO = 5,
  CS_ERR_CORRUPT = 6,
  CS_ERR_MIGRATION = 7,
  CS_ERR_EVALUATION = 8,
  CS_ERR_RUNTIME = 9,
  CS_ERR_NULL_ARGUMENT = 10
} cs_status;

typedef struct cs_config cs_config;
typedef struct cs_dataset cs_dataset;
typedef struct cs_search cs_search;

CS_API const char* cs_version(void);
CS_API const char* cs_status_name(cs_status status);
/* Message of the last failed call on this thread; empty after a success. */
CS_API const char* cs_last_error(void);
/* Releases any char* handed out by this library. */
CS_API void cs_string_free(char* s);

/* Run configuration. profile: "toy" or "paper_shaped". */
CS_API cs_status cs_config_default(const char* profile, cs_config** out);
CS_API cs_status cs_config_load(const char* path, cs_config** out);
CS_API cs_status cs_config_parse(const char* json_text, cs_config** out);
/* Applies a JSON merge patch and validates the result; the config is left
   unchanged on failure. */
CS_API cs_status cs_config_patch(cs_config* cfg, const char* json_patch);
CS_API cs_status cs_config_to_json(const cs_config* cfg, char** out);
CS_API void cs_config_free(cs_config* cfg);

/* Synthetic stereo data. */
CS_API cs_status cs_dataset_generate(const cs_config* cfg, cs_dataset** out);
CS_API cs_status cs_dataset_load(const char* dir, cs_dataset** out);
CS_API cs_status cs_dataset_save(const cs_dataset* ds, const char* dir);
CS_API cs_status cs_dataset_manifest(const cs_dataset* ds, char** json_out);
CS_API void cs_dataset_free(cs_dataset* ds);

/* Architecture search: warm start, alternating updates, discretization. */
CS_API cs_status cs_search_run(const cs_config* cfg, const cs_dataset* ds, cs_search** out);
CS_API cs_status cs_search_genotype(const cs_search* s, char** json_out);
CS_API cs_status cs_search_alphas(const cs_search* s, char** json_out);
CS_API cs_status cs_search_history_csv(const cs_search* s, char** csv_out);
/* {"initial_val_epe", "final_val_epe", "val_curve", "alpha_updates", "alpha_updates_on_val"} */
CS_API cs_status cs_search_summary(const cs_search* s, char** json_out);
CS_API void cs_search_free(cs_search* s);

CS_API cs_status cs_random_genotype(int num_intermediate, uint64_t seed, char** json_out);
CS_API cs_status cs_genotype_validate(const char* json_text);

/* Builds the stack described by the config's train section around the
   genotype, trains it and evaluates the test split. With zero_refinement the
   refinement nets start from zero weights and the result records whether the
   stack output equals the first net's output before training. A non-null
   checkpoint_dir receives the trained weights. */
CS_API cs_status cs_train_run(const cs_config* cfg, const cs_dataset* ds, const char* genotype_json,
                              int zero_refinement, const char* checkpoint_dir, char** result_json);

/* objective: "synthetic" (2-D quadratic bowl) or "restart" (resume the
   checkpoint and train for `budget` iterations, loss = validation EPE).
   space_json may be null for the objective's default space. The trial log is
   written to log_path when non-null. */
CS_API cs_status cs_bohb_run(const cs_config* cfg, const char* objective, const char* space_json,
                             const cs_dataset* ds, const char* checkpoint_dir, const char* log_path,
                             char** summary_json);
/* Budget consumed by n_iterations SuccessiveHalving runs cycling through the
   Hyperband brackets. */
CS_API cs_status cs_bohb_closed_form_budget(double b_min, double b_max, double eta, int n_iterations, double* out);

/* Per-budget importance from a trial log. budget <= 0 analyses every budget
   with enough finished trials. */
CS_API cs_status cs_fanova_run(const cs_config* cfg, const char* trials_path, double budget, char** report_json,
                               char** curves_csv);

/* wall_time,budget,best_loss rows for every incumbent step in a trial log. */
CS_API cs_status cs_incumbent_csv(const char* trials_path, char** csv_out);

/* Writes trials.svg, trials.csv and incumbent.csv (plus learning_curves.svg
   and .csv when history_csv_path is set) into out_dir. */
CS_API cs_status cs_report_render(const char* trials_path, const char* history_csv_path, const char* out_dir,
                                  char** summary_json);

#ifdef __cplusplus
}
#endif

#endif
