"""参数化 Q 学习：线性特征折扣 MDP 上的 PPQ / OPPQ 与实验编排"""
