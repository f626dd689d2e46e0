/* C ABI for the protomil library.
 *
 * All paths are NUL-terminated UTF-8. Functions returning a pointer return
 * NULL on failure; functions returning int return PROTOMIL_OK (0) on
 * success and a PROTOMIL_ERR_* code otherwise. After any failure,
 * protomil_last_error() returns a human-readable message valid until the
 * next failing call on the same thread. Handles are not thread-safe; guard
 * shared handles externally.
 */

#ifndef PROTOMIL_H
#define PROTOMIL_H

#include <stddef.h>

#ifdef __cplusplus
extern "C" {
#endif

#define PROTOMIL_OK 0
#define PROTOMIL_ERR_INVALID_ARGUMENT 1
#define PROTOMIL_ERR_IO 2
#define PROTOMIL_ERR_SCHEMA 3
#define PROTOMIL_ERR_NUMERIC 4
#define PROTOMIL_ERR_UNDEFINED_METRIC 5

/* Opaque handles. */
typedef struct ProtomilModel ProtomilModel;
typedef struct ProtomilDataset ProtomilDataset;

/* Message for the most recent error on this thread. Never NULL. */
const char *protomil_last_error(void);

/* Load a checkpoint directory produced by the `protomil train` command.
 * Free with protomil_model_free. */
ProtomilModel *protomil_model_load(const char *path);
void protomil_model_free(ProtomilModel *model);

/* Load a bag-dataset manifest (directory or manifest file path).
 * Free with protomil_dataset_free. */
ProtomilDataset *protomil_dataset_load(const char *path);
void protomil_dataset_free(ProtomilDataset *dataset);

/* Number of bags, or -1 if the handle is NULL. */
ptrdiff_t protomil_dataset_len(const ProtomilDataset *dataset);

/* True label of a bag: 0 negative, 1 positive, -1 on bad handle/index. */
int protomil_bag_label(const ProtomilDataset *dataset, size_t bag_index);

/* Score one bag. Writes the positive-class probability and the predicted
 * label (0 negative, 1 positive). */
int protomil_predict_bag(const ProtomilModel *model,
                         const ProtomilDataset *dataset,
                         size_t bag_index,
                         double *out_probability,
                         int *out_label);

/* Evaluate over every bag. *out_auc is NaN when the dataset has a single
 * class (the call still succeeds). */
int protomil_evaluate(const ProtomilModel *model,
                      const ProtomilDataset *dataset,
                      double *out_accuracy,
                      double *out_auc,
                      double *out_f_score);

#ifdef __cplusplus
}
#endif

#endif /* PROTOMIL_H */
