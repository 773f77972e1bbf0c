"""Loop-based cosine KNN, written straight from the contract.

Independent of the vectorized implementation: per-pair cosine similarity,
neighbors chosen by descending similarity with earlier train rows winning
ties, and a vote resolved by count, then summed similarity, then lowest
class index.
"""

import math


def _cosine(a, b):
    num = sum(x * y for x, y in zip(a, b))
    return num / (math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(y * y for y in b)))


def naive_knn_predict(train_features, train_labels, test_row, k):
    sims = [_cosine(test_row, row) for row in train_features]
    # python sort is stable, so equal similarities keep train order
    order = sorted(range(len(sims)), key=lambda j: -sims[j])[:k]
    counts, sums = {}, {}
    for j in order:
        lab = int(train_labels[j])
        counts[lab] = counts.get(lab, 0) + 1
        sums[lab] = sums.get(lab, 0.0) + sims[j]
    best = None
    for lab in counts:
        key = (-counts[lab], -sums[lab], lab)
        if best is None or key < best[0]:
            best = (key, lab)
    return best[1]


def naive_knn_accuracy(train_features, train_labels, test_features, test_labels, k):
    correct = 0
    for row, lab in zip(test_features, test_labels):
        if naive_knn_predict(train_features, train_labels, row, k) == int(lab):
            correct += 1
    return correct / len(test_features)
