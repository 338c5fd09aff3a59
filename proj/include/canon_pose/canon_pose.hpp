#pragma once

#include "canon_pose/checkpoint.hpp"
#include "canon_pose/config.hpp"
#include "canon_pose/datasets.hpp"
#include "canon_pose/errors.hpp"
#include "canon_pose/evaluation.hpp"
#include "canon_pose/imaging.hpp"
#include "canon_pose/layers.hpp"
#include "canon_pose/losses.hpp"
#include "canon_pose/model.hpp"
#include "canon_pose/optim.hpp"
#include "canon_pose/png.hpp"
#include "canon_pose/tensor.hpp"
#include "canon_pose/training.hpp"
