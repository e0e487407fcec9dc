#ifndef CFLAB_EXPERIMENTS_EXPERIMENTS_HPP
#define CFLAB_EXPERIMENTS_EXPERIMENTS_HPP

#include "cflab/experiments/classifier_table.hpp"
#include "cflab/experiments/comparison.hpp"
#include "cflab/experiments/lesion.hpp"
#include "cflab/experiments/sweep.hpp"

#endif  // CFLAB_EXPERIMENTS_EXPERIMENTS_HPP
